"""Aggregated normative diffusion: v-prediction denoising with pyramid noise.

Per-timestep squared deviations between the clean image and its
one-step denoised estimate are aggregated with a geometric mean over a
timestep window, which suppresses deviations that appear at only a few
noise levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..backbone import TrainConfig, UNetConfig, build_unet, train_loop
from ..errors import ConfigError
from .base import Detector, finish_training, register, slice_stream, to_tensor

GEOMEAN_EPS = 1e-12
TIME_SCALE = 1000.0  # timestep fed to the network as t * TIME_SCALE


@dataclass
class AndiConfig:
    num_latents: int = 1000
    logsnr_min: float = -15.0
    logsnr_max: float = 15.0
    t_lower: int = 25
    t_upper: int = 125
    pyramid_discount: float = 0.9
    shift_base: int = 56
    v_prediction: bool = True
    timestep_stride: int = 1  # evaluate every k-th timestep in [t_lower, t_upper]

    def __post_init__(self):
        if not 0 < self.t_lower < self.t_upper <= self.num_latents:
            raise ConfigError(
                f"need 0 < t_lower < t_upper <= num_latents, got "
                f"({self.t_lower}, {self.t_upper}, {self.num_latents})"
            )
        if not 0.0 <= self.pyramid_discount < 1.0:
            raise ConfigError(f"pyramid_discount must lie in [0,1), got {self.pyramid_discount}")
        if self.logsnr_min >= self.logsnr_max:
            raise ConfigError("logsnr_min must be below logsnr_max")
        if self.shift_base <= 0 or self.timestep_stride < 1:
            raise ConfigError("shift_base and timestep_stride must be positive")

    def timesteps(self) -> list[int]:
        return list(range(self.t_lower, self.t_upper + 1, self.timestep_stride))


def andi_logsnr(t: float, config: AndiConfig, image_size: int) -> float:
    """Shifted cosine log-SNR schedule, clamped to the configured range."""
    t = float(t)
    if t <= 0.0:
        return config.logsnr_max
    if t >= 1.0:
        return config.logsnr_min
    raw = -2.0 * math.log(math.tan(math.pi * t / 2.0)) + 2.0 * math.log(
        config.shift_base / image_size
    )
    return float(min(max(raw, config.logsnr_min), config.logsnr_max))


def alpha_sigma(logsnr: float) -> tuple[float, float]:
    """Variance-preserving coefficients: alpha^2 + sigma^2 = 1."""
    alpha = math.sqrt(1.0 / (1.0 + math.exp(-logsnr)))
    sigma = math.sqrt(1.0 / (1.0 + math.exp(logsnr)))
    return alpha, sigma


def _bilinear_var_axis(src: int, dst: int) -> torch.Tensor:
    """Per-position variance factor of aligned-corner linear interpolation.

    Interpolating independent unit-variance values with fraction a gives
    variance a^2 + (1-a)^2 along one axis; bilinear factors multiply.
    """
    if dst == 1 or src == 1:
        return torch.ones(dst)
    pos = torch.arange(dst, dtype=torch.float64) * (src - 1) / (dst - 1)
    frac = pos - torch.floor(pos)
    return (frac**2 + (1.0 - frac) ** 2).float()


def pyramid_noise(
    shape: tuple[int, int],
    discount: float,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    batch: int = 1,
) -> torch.Tensor:
    """Multi-resolution Gaussian noise with per-pixel unit variance.

    Level i is unit Gaussian noise drawn at shape/2^i (down to 4 pixels),
    bilinearly upsampled with aligned corners, standardized by its
    analytic per-pixel interpolation variance, and weighted by
    discount^i; the sum is divided by the analytic standard deviation of
    the level weights. discount=0 keeps only the full-resolution level.
    """
    h, w = shape
    if generator is None:
        generator = torch.Generator()
        if seed is not None:
            generator.manual_seed(seed)
    noise = torch.zeros(batch, 1, h, w)
    weight_sq_sum = 0.0
    level = 0
    ch, cw = h, w
    while True:
        weight = discount**level
        draw = torch.randn(batch, 1, ch, cw, generator=generator)
        if (ch, cw) != (h, w):
            draw = F.interpolate(draw, size=(h, w), mode="bilinear", align_corners=True)
            var = _bilinear_var_axis(ch, h)[:, None] * _bilinear_var_axis(cw, w)[None, :]
            draw = draw / torch.sqrt(var)
        noise = noise + weight * draw
        weight_sq_sum += weight**2
        if weight == 0.0 or min(ch, cw) <= 4:
            break
        ch, cw = max(ch // 2, 4), max(cw // 2, 4)
        level += 1
    return noise / math.sqrt(weight_sq_sum)


def andi_anomaly_map(model, slice2d: np.ndarray, config: AndiConfig, seed: int) -> np.ndarray:
    """Geometric mean over timesteps of per-pixel squared denoising deviation.

    The input must already live in the model's [-1, 1] range. At each
    timestep the clean image is noised with pyramid noise, the network's
    v-prediction is converted back to a clean estimate, and the squared
    difference to the input is recorded.
    """
    x = to_tensor(slice2d)
    image_size = x.shape[-1]
    generator = torch.Generator().manual_seed(seed)
    model.eval()
    log_sum = torch.zeros_like(x)
    steps = config.timesteps()
    with torch.no_grad():
        for t_int in steps:
            t = t_int / config.num_latents
            alpha, sigma = alpha_sigma(andi_logsnr(t, config, image_size))
            eps = pyramid_noise(x.shape[-2:], config.pyramid_discount, generator=generator)
            z = alpha * x + sigma * eps
            v_hat = model(z, torch.full((1,), t * TIME_SCALE))
            x_hat = alpha * z - sigma * v_hat
            deviation = (x - x_hat) ** 2
            log_sum = log_sum + torch.log(deviation + GEOMEAN_EPS)
    return torch.exp(log_sum / len(steps))[0, 0].numpy()


@register
class AndiDetector(Detector):
    """Scores in [-1,1] model space; accepts [0,1] slices and rescales."""

    name = "andi"

    def __init__(self, unet: UNetConfig, train: TrainConfig, config: AndiConfig | None = None):
        self.config = config if config is not None else AndiConfig()
        if not unet.time_conditioning:
            raise ConfigError("diffusion model requires time conditioning")
        self.unet_config = unet
        self.train_config = train
        self.model = build_unet(unet)
        self._seed = train.seed

    def fit(self, train_slices, val_slices, seed: int) -> None:
        cfg = self.config
        image_size = self.unet_config.image_size

        def loss_terms(model, batch, generator):
            x = batch * 2.0 - 1.0
            b = x.shape[0]
            t = torch.rand(b, generator=generator)
            coeffs = [alpha_sigma(andi_logsnr(float(ti), cfg, image_size)) for ti in t]
            alpha = torch.tensor([c[0] for c in coeffs]).view(b, 1, 1, 1).float()
            sigma = torch.tensor([c[1] for c in coeffs]).view(b, 1, 1, 1).float()
            eps = pyramid_noise(x.shape[-2:], cfg.pyramid_discount, generator=generator, batch=b)
            z = alpha * x + sigma * eps
            v_hat = model(z, t * TIME_SCALE)
            eps_hat = sigma * z + alpha * v_hat
            return torch.mean((eps_hat - eps) ** 2)

        generator = torch.Generator().manual_seed(seed)

        def loss_fn(model, batch):
            return loss_terms(model, batch, generator)

        def eval_loss(model, batch):
            return loss_terms(model, batch, torch.Generator().manual_seed(seed))

        stream = slice_stream(train_slices, self.train_config.batch_size, seed)
        ckpts = train_loop(self.model, stream, loss_fn, self.train_config)
        chosen = finish_training(self.model, ckpts, val_slices, eval_loss, use_ema=True)
        self.checkpoint_steps = tuple(c.step for c in ckpts)
        self.selected_step = chosen.step
        self._seed = seed

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        return andi_anomaly_map(self.model, np.asarray(slice2d) * 2.0 - 1.0, self.config, self._seed)
