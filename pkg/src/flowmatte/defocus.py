"""Depth-weighted background blur recomposited through a predicted matte."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import AlphaSequence, ParameterError, VideoClip, check_same_shape, composite

BLUR_TRUNCATE = 3.0
BLUR_LEVELS = 8


def normalize_depth(depth, shape) -> np.ndarray:
    """Broadcast a scalar or (T,)H,W depth map to ``shape`` (T,H,W), scaled by its maximum."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 0:
        d = np.full(shape, float(d))
    elif d.ndim == 2:
        d = np.broadcast_to(d, shape)
    if d.shape != tuple(shape):
        raise ValueError(f"depth shape {d.shape} does not match clip {tuple(shape)}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("depth must be finite and non-negative")
    peak = d.max()
    return d / peak if peak > 0 else np.zeros(shape)


def gaussian_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur of an H x W x C frame (mirror boundary)."""
    if sigma == 0:
        return frame.copy()
    return ndimage.gaussian_filter(frame, sigma=(sigma, sigma, 0), mode="reflect", truncate=BLUR_TRUNCATE)


def depth_blur(frames: np.ndarray, depth01: np.ndarray, strength: float, levels: int = BLUR_LEVELS) -> np.ndarray:
    """Blur with per-pixel sigma ``strength * depth``.

    A stack of uniformly spaced sigmas is precomputed and each pixel interpolates
    linearly between the two levels that bracket its sigma, so a constant
    full-depth map reduces to a single Gaussian of width ``strength``.
    """
    sigmas = np.linspace(0.0, strength, levels)
    out = np.empty_like(frames)
    pos = depth01 * (levels - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, levels - 2)
    frac = (pos - lo)[..., None]
    for t, frame in enumerate(frames):
        stack = np.stack([gaussian_blur(frame, s) for s in sigmas])
        rows, cols = np.indices(lo[t].shape)
        a = stack[lo[t], rows, cols]
        b = stack[lo[t] + 1, rows, cols]
        out[t] = np.where(frac[t] == 0, a, (1 - frac[t]) * a + frac[t] * b)
    return out


def defocus(clip, alpha, depth=1.0, strength: float = 2.0) -> VideoClip:
    """Keep the matted foreground sharp and blur the rest by depth."""
    if strength < 0:
        raise ParameterError(f"strength must be non-negative, got {strength}")
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float64)
    a = alpha.alphas if isinstance(alpha, AlphaSequence) else np.asarray(alpha, dtype=np.float64)
    check_same_shape(frames[..., 0], a, "clip/alpha", axes=("T", "H", "W"))
    fps = clip.fps if isinstance(clip, VideoClip) else None
    if strength == 0:
        return VideoClip(frames.copy(), fps)
    d = normalize_depth(depth, a.shape)
    blurred = depth_blur(frames, d, float(strength))
    out = composite(frames, blurred, a)
    return VideoClip(out.frames, fps)
