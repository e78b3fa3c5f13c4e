"""Latent flow-matching loss and the pixel-space matte losses.

Pixel losses take mattes shaped (..., H, W); leading axes (batch, time) are
flattened into frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .codec import decode
from .core import from_codec_range
from .flow import FlowState, reconstruct_clean, target_velocity

_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class LossWeights:
    lambda_pixel: float = 0.1
    lambda_gp: float = 0.1
    pyramid_levels: int = 3

    def __post_init__(self):
        if self.lambda_pixel < 0 or self.lambda_gp < 0:
            raise ValueError("loss weights must be non-negative")
        if int(self.pyramid_levels) < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass
class LossReport:
    latent: float
    l1: float = 0.0
    lap: float = 0.0
    gp: float = 0.0
    total: float = 0.0
    lambda_pixel: float = 0.0
    lambda_gp: float = 0.0

    def check(self, tol: float = 1e-9) -> bool:
        expected = self.latent + self.lambda_pixel * (self.l1 + self.lap + self.lambda_gp * self.gp)
        return abs(expected - self.total) <= tol * max(1.0, abs(expected))

    def as_dict(self) -> dict:
        return asdict(self)


def _same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def latent_fm_loss(v_pred, z_alpha, eps):
    _same(v_pred, z_alpha, "latent_fm_loss")
    return torch.mean((v_pred - target_velocity(z_alpha, eps)) ** 2)


def _frames(x):
    return x.reshape(-1, 1, x.shape[-2], x.shape[-1])


def _blur(x):
    k = _BINOMIAL.to(x)
    k2 = torch.outer(k, k)[None, None]
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="reflect"), k2)


def _reflect_ok(x):
    return min(x.shape[-2:]) > 2


def _smooth(x):
    # reflect padding needs > 2 pixels; tiny residual maps fall back to replicate
    if _reflect_ok(x):
        return _blur(x)
    k = _BINOMIAL.to(x)
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="replicate"), torch.outer(k, k)[None, None])


def _upsample(low, size):
    up = low.new_zeros(low.shape[0], low.shape[1], *size)
    up[..., ::2, ::2] = low
    return 4.0 * _smooth(up)


def laplacian_pyramid(x, levels: int):
    """Band-pass images ``[band_0, ..., band_{levels-1}]`` plus the low-pass residual.

    ``current_k == band_k + upsample(current_{k+1})`` holds exactly, so the
    decomposition is invertible.
    """
    current = _frames(x)
    bands = []
    for _ in range(levels):
        down = _smooth(current)[..., ::2, ::2]
        bands.append(current - _upsample(down, current.shape[-2:]))
        current = down
    return bands, current


def check_pyramid_size(shape, levels: int) -> None:
    h, w = shape[-2:]
    if min(h, w) / 2 ** (levels - 1) < 4:
        raise ValueError(f"{h}x{w} is too small for a {levels}-level pyramid")


def laplacian_pyramid_loss(pred, gt, levels: int = 3):
    _same(pred, gt, "laplacian_pyramid_loss")
    check_pyramid_size(pred.shape, levels)
    bp, rp = laplacian_pyramid(pred, levels)
    bg, rg = laplacian_pyramid(gt, levels)
    loss = sum((2.0**k) * F.l1_loss(a, b) for k, (a, b) in enumerate(zip(bp, bg)))
    return loss + (2.0**levels) * F.l1_loss(rp, rg)


def spatial_gradients(x):
    """Forward differences with a replicated last row/column (so edges get zero)."""
    dx = torch.diff(x, dim=-1, append=x[..., -1:])
    dy = torch.diff(x, dim=-2, append=x[..., -1:, :])
    return dx, dy


def gradient_penalty_loss(pred, gt):
    _same(pred, gt, "gradient_penalty_loss")
    pdx, pdy = spatial_gradients(pred)
    gdx, gdy = spatial_gradients(gt)
    return F.l1_loss(pdx, gdx) + F.l1_loss(pdy, gdy)


def pixel_loss(pred, gt, weights: LossWeights = LossWeights()):
    """Returns ``(value, components)`` with components ``l1``, ``lap``, ``gp``."""
    _same(pred, gt, "pixel_loss")
    l1 = F.l1_loss(pred, gt)
    lap = laplacian_pyramid_loss(pred, gt, weights.pyramid_levels)
    gp = gradient_penalty_loss(pred, gt)
    return l1 + lap + weights.lambda_gp * gp, {"l1": l1, "lap": lap, "gp": gp}


def total_loss(latent_part, pixel_part, weights: LossWeights = LossWeights(), pixel_enabled: bool = True):
    if weights.lambda_pixel < 0:
        raise ValueError("lambda_pixel must be non-negative")
    if not pixel_enabled:
        return latent_part
    return latent_part + weights.lambda_pixel * pixel_part


def decode_for_pixel_loss(state: FlowState, v_pred, codec):
    """Estimate the clean matte from one velocity prediction and decode it.

    ``state.phi`` and ``v_pred`` are latents shaped (..., h, w, c); the result
    is a matte in [0, 1] shaped (..., H, W). Gradients flow back into ``v_pred``.
    """
    z_hat = reconstruct_clean(state, v_pred)
    return from_codec_range(decode(z_hat, codec, matte=True))


def report_from(latent, comps: dict | None, weights: LossWeights, pixel_enabled: bool) -> LossReport:
    lam = weights.lambda_pixel if pixel_enabled else 0.0
    r = LossReport(latent=float(latent), lambda_pixel=lam, lambda_gp=weights.lambda_gp)
    if comps is not None:
        r.l1, r.lap, r.gp = (float(comps[k]) for k in ("l1", "lap", "gp"))
    r.total = r.latent + r.lambda_pixel * (r.l1 + r.lap + r.lambda_gp * r.gp)
    if not all(math.isfinite(v) for v in (r.latent, r.l1, r.lap, r.gp)):
        bad = [k for k in ("latent", "l1", "lap", "gp") if not math.isfinite(getattr(r, k))]
        raise FloatingPointError(f"non-finite loss component(s): {', '.join(bad)}")
    return r
