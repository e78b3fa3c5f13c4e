"""Straight-path flow matching: corruption, velocity target and Euler sampling.

Convention: noise lives at t=0 and data at t=1, so the interpolant is
``t * z + (1 - t) * eps`` and the target velocity ``z - eps`` is constant
along each path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import ParameterError, ShapeMismatchError


def _check_t(t):
    tt = torch.as_tensor(t)
    if torch.any(tt < 0) or torch.any(tt > 1):
        raise ParameterError(f"t must be in [0, 1], got {t}")


def _check_pair(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        for i, (la, lb) in enumerate(zip(a.shape, b.shape)):
            if la != lb:
                raise ShapeMismatchError(str(i), la, lb, what)
        raise ShapeMismatchError("ndim", len(a.shape), len(b.shape), what)


def _bcast(t, like):
    """Broadcast a scalar or per-batch time against ``like``'s trailing dims."""
    if not isinstance(like, torch.Tensor):
        like = np.asarray(like)
        t = np.asarray(t, dtype=like.dtype)
        return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


@dataclass(frozen=True)
class FlowState:
    t: object
    phi: object

    def __post_init__(self):
        _check_t(self.t)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 3
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")


def corrupt(z_alpha, eps, t):
    _check_pair(z_alpha, eps, "corrupt")
    _check_t(t)
    tb = _bcast(t, z_alpha)
    return tb * z_alpha + (1 - tb) * eps


def target_velocity(z_alpha, eps):
    _check_pair(z_alpha, eps, "target_velocity")
    return z_alpha - eps


def reconstruct_clean(state: FlowState, v_hat):
    """Jump straight to the data end of the path: ``phi + (1 - t) * v``."""
    _check_pair(state.phi, v_hat, "reconstruct_clean")
    tb = _bcast(state.t, state.phi)
    return state.phi + (1 - tb) * v_hat


def sample_time(rng, size=None):
    """Uniform draw on [0, 1] from a numpy Generator or a torch Generator."""
    if isinstance(rng, torch.Generator):
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        return torch.rand(shape, generator=rng, dtype=torch.float64)
    return rng.uniform(0.0, 1.0, size=size)


class IntegrationError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite velocity at Euler step {step}")


def euler_sample(velocity_fn, z_c, cfg: SamplerConfig, shape=None, noise=None):
    """Integrate ``d phi = v(phi, z_c, t) dt`` from noise at t=0 to t=1.

    ``shape`` defaults to ``z_c``'s shape. ``noise`` overrides the seeded
    starting point (used by tests with an oracle field).
    """
    steps = int(cfg.steps)
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    shape = tuple(z_c.shape) if shape is None else tuple(shape)
    if noise is None:
        gen = torch.Generator().manual_seed(int(cfg.seed))
        noise = torch.randn(shape, generator=gen, dtype=z_c.dtype).to(z_c.device)
    phi = noise
    dt = 1.0 / steps
    for k in range(steps):
        t_k = k / steps
        v = velocity_fn(phi, z_c, t_k)
        if not torch.isfinite(v).all():
            raise IntegrationError(k)
        phi = phi + dt * v
    return phi
