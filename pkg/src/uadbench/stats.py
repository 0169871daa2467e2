"""Nonparametric statistical tests for the bias and robustness analyses.

All tests are implemented directly on ranks; only the reference
distributions (normal, t, chi-square) come from :mod:`scipy.stats`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.stats as st

from .errors import ConfigError

EXACT_MWU_LIMIT = 12


@dataclass
class TestResult:
    """Outcome of a hypothesis test.

    Parameters
    ----------
    statistic : float
        The test statistic.
    p_value : float
        Two-sided p-value in [0, 1].
    method : str
        Name of the procedure that produced the result.
    n : tuple of int
        Sample sizes involved.
    extras : dict
        Named auxiliary quantities (degrees of freedom, rho, d, ...).
    """

    statistic: float
    p_value: float
    method: str
    n: tuple[int, ...]
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ConfigError(f"p_value outside [0,1]: {self.p_value}")


def _u_statistic(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    pooled = np.concatenate([x, y])
    ranks = st.rankdata(pooled)
    n_x = x.size
    u_x = float(ranks[:n_x].sum() - n_x * (n_x + 1) / 2.0)
    return u_x, ranks


def mann_whitney_u(x, y) -> TestResult:
    """Two-sided Mann-Whitney U test.

    Uses exact enumeration of all rank arrangements when the pooled sample
    has at most 12 observations and no ties; otherwise the normal
    approximation with tie correction and continuity correction.

    Parameters
    ----------
    x, y : array_like
        Independent samples, both nonempty.

    Returns
    -------
    TestResult
        statistic is U of the first sample; extras carry ``u_x`` and ``u_y``.

    References
    ----------
    H. B. Mann and D. R. Whitney, "On a test of whether one of two random
    variables is stochastically larger than the other", Ann. Math. Statist.
    18 (1947) 50-60.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ConfigError("mann_whitney_u requires two nonempty samples")
    n_x, n_y = x.size, y.size
    u_x, ranks = _u_statistic(x, y)
    u_y = n_x * n_y - u_x
    pooled = np.concatenate([x, y])
    has_ties = np.unique(pooled).size < pooled.size

    if n_x + n_y <= EXACT_MWU_LIMIT and not has_ties:
        u_min = min(u_x, u_y)
        total = math.comb(n_x + n_y, n_x)
        at_or_below = 0
        all_ranks = np.arange(1, n_x + n_y + 1)
        offset = n_x * (n_x + 1) / 2.0
        for combo in itertools.combinations(all_ranks, n_x):
            u = sum(combo) - offset
            if min(u, n_x * n_y - u) <= u_min:
                at_or_below += 1
        # Counting min(U_x, U_y) <= u_min covers both tails at once.
        p = min(1.0, at_or_below / total)
        method = "mann-whitney-u-exact"
        extras = {"u_x": u_x, "u_y": u_y}
    else:
        mean_u = n_x * n_y / 2.0
        n = n_x + n_y
        _, counts = np.unique(pooled, return_counts=True)
        tie_term = float(np.sum(counts**3 - counts)) / (n * (n - 1))
        var_u = n_x * n_y / 12.0 * ((n + 1) - tie_term)
        if var_u <= 0:
            p = 1.0
            z = 0.0
        else:
            z = (abs(u_x - mean_u) - 0.5) / math.sqrt(var_u)
            z = max(z, 0.0)
            p = min(1.0, 2.0 * float(st.norm.sf(z)))
        method = "mann-whitney-u-normal"
        extras = {"u_x": u_x, "u_y": u_y, "z": z}
    return TestResult(statistic=u_x, p_value=p, method=method, n=(n_x, n_y), extras=extras)


def benjamini_hochberg(pvals) -> list[float]:
    """Benjamini-Hochberg step-up adjusted p-values.

    adjusted_i = min over all j with rank(j) >= rank(i) of p_j * m / rank_j,
    capped at 1; the output preserves the input order.

    References
    ----------
    Y. Benjamini and Y. Hochberg, "Controlling the false discovery rate",
    J. R. Statist. Soc. B 57 (1995) 289-300.
    """
    p = np.asarray(pvals, dtype=np.float64)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1)):
        raise ConfigError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    adjusted = np.empty(m, dtype=np.float64)
    adjusted[order] = adjusted_sorted
    return adjusted.tolist()


def spearman(x, y) -> TestResult:
    """Spearman rank correlation with a t-distribution p-value.

    rho is the Pearson correlation of tie-averaged ranks; the two-sided
    p-value uses t = rho * sqrt((n-2)/(1-rho^2)) with n-2 degrees of
    freedom.

    References
    ----------
    C. Spearman, "The proof and measurement of association between two
    things", Am. J. Psychol. 15 (1904) 72-101.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ConfigError("spearman requires paired samples of equal length")
    n = x.size
    if n < 3:
        raise ConfigError(f"spearman needs n >= 3, got {n}")
    if np.unique(x).size == 1 or np.unique(y).size == 1:
        raise ConfigError("constant input: rank variance is zero")
    rx = st.rankdata(x)
    ry = st.rankdata(y)
    rho = float(np.corrcoef(rx, ry)[0, 1])
    if abs(rho) >= 1.0:
        p = 0.0
        t = math.inf if rho > 0 else -math.inf
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho**2))
        p = min(1.0, 2.0 * float(st.t.sf(abs(t), df=n - 2)))
    return TestResult(
        statistic=rho,
        p_value=p,
        method="spearman",
        n=(n,),
        extras={"rho": rho, "t": t, "df": float(n - 2)},
    )


def scheirer_ray_hare(values, factor_a, factor_b) -> dict[str, TestResult]:
    """Scheirer-Ray-Hare extension of Kruskal-Wallis to two factors.

    All observations are rank-transformed (ties averaged); two-way ANOVA
    sums of squares are computed on the ranks and each effect's H statistic
    is SS_effect / MS_total with MS_total = SS_total / (N-1). p-values come
    from chi-square distributions with (a-1), (b-1) and (a-1)(b-1) degrees
    of freedom.

    Returns
    -------
    dict
        Keys ``"a"``, ``"b"``, ``"interaction"``; values are TestResult.

    References
    ----------
    C. J. Scheirer, W. S. Ray and N. Hare, "The analysis of ranked data
    derived from completely randomized factorial designs", Biometrics 32
    (1976) 429-434.
    """
    v = np.asarray(values, dtype=np.float64)
    fa = np.asarray(factor_a)
    fb = np.asarray(factor_b)
    if not (v.size == fa.size == fb.size) or v.size == 0:
        raise ConfigError("values and both factors must be nonempty and aligned")
    levels_a = sorted(set(fa.tolist()))
    levels_b = sorted(set(fb.tolist()))
    if len(levels_a) < 2:
        raise ConfigError(f"factor_a has a single level {levels_a}: effect undefined")
    if len(levels_b) < 2:
        raise ConfigError(f"factor_b has a single level {levels_b}: effect undefined")
    for la in levels_a:
        for lb in levels_b:
            if not np.any((fa == la) & (fb == lb)):
                raise ConfigError(f"empty cell ({la!r}, {lb!r})")

    ranks = st.rankdata(v)
    grand = ranks.mean()
    n = ranks.size
    ss_total = float(np.sum((ranks - grand) ** 2))

    def group_ss(labels, levels):
        ss = 0.0
        for lev in levels:
            sel = labels == lev
            ss += sel.sum() * (ranks[sel].mean() - grand) ** 2
        return float(ss)

    ss_a = group_ss(fa, levels_a)
    ss_b = group_ss(fb, levels_b)
    ss_cells = 0.0
    for la in levels_a:
        for lb in levels_b:
            sel = (fa == la) & (fb == lb)
            ss_cells += sel.sum() * (ranks[sel].mean() - grand) ** 2
    ss_ab = float(ss_cells) - ss_a - ss_b

    df = {
        "a": len(levels_a) - 1,
        "b": len(levels_b) - 1,
        "interaction": (len(levels_a) - 1) * (len(levels_b) - 1),
    }
    ss = {"a": ss_a, "b": ss_b, "interaction": ss_ab}
    ms_total = ss_total / (n - 1) if n > 1 else 0.0
    results = {}
    for effect, d in df.items():
        if ms_total == 0.0:
            h, p = 0.0, 1.0
        else:
            h = max(0.0, ss[effect] / ms_total)
            p = float(st.chi2.sf(h, df=d))
        results[effect] = TestResult(
            statistic=h,
            p_value=p,
            method="scheirer-ray-hare",
            n=(n,),
            extras={"df": float(d), "ss": ss[effect], "ms_total": ms_total},
        )
    return results


def cohens_d(group1, group2) -> float:
    """Cohen's d with the pooled standard deviation.

    d = (mean1 - mean2) / s_pooled where
    s_pooled = sqrt(((n1-1)s1^2 + (n2-1)s2^2) / (n1+n2-2)); positive when
    the first group's mean is larger.

    References
    ----------
    J. Cohen, Statistical Power Analysis for the Behavioral Sciences,
    2nd ed., Lawrence Erlbaum, 1988.
    """
    a = np.asarray(group1, dtype=np.float64)
    b = np.asarray(group2, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ConfigError("cohens_d needs at least 2 observations per group")
    n1, n2 = a.size, b.size
    s1 = a.var(ddof=1)
    s2 = b.var(ddof=1)
    pooled = math.sqrt(((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2))
    if pooled == 0.0:
        raise ConfigError("pooled standard deviation is zero: d undefined")
    return float((a.mean() - b.mean()) / pooled)
