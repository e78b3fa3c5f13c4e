"""Compositing algebra, value ranges and the in-memory clip types."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

ArrayLike = Union[np.ndarray, "VideoClip", "AlphaSequence"]


class ShapeMismatchError(ValueError):
    """Raised when paired arrays disagree along a named axis."""

    def __init__(self, axis: str, left, right, what: str = ""):
        self.axis = axis
        self.left = left
        self.right = right
        prefix = f"{what}: " if what else ""
        super().__init__(f"{prefix}mismatch along axis '{axis}': {left} != {right}")


class RangeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


_AXES = ("T", "H", "W", "C")


def _as_array(x) -> np.ndarray:
    if isinstance(x, VideoClip):
        return x.frames
    if isinstance(x, AlphaSequence):
        return x.alphas
    return np.asarray(x)


@dataclass(frozen=True)
class VideoClip:
    """T x H x W x 3 colour frames with values in [0, 1]."""

    frames: np.ndarray
    fps: Optional[float] = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"VideoClip expects a T x H x W x 3 array, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("VideoClip needs at least one frame")
        if frames.size and (frames.min() < 0 or frames.max() > 1):
            raise RangeError("VideoClip values must lie in [0, 1]")
        frames = frames.copy()
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class AlphaSequence:
    """T x H x W opacity values in [0, 1]."""

    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas)
        if alphas.ndim != 3:
            raise ValueError(f"AlphaSequence expects a T x H x W array, got {alphas.shape}")
        if alphas.size and (alphas.min() < 0 or alphas.max() > 1):
            raise RangeError("AlphaSequence values must lie in [0, 1]")
        alphas = alphas.copy()
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def shape(self):
        return self.alphas.shape

    def __len__(self):
        return self.alphas.shape[0]


@dataclass(frozen=True)
class CompositeSample:
    fg: VideoClip
    bg: VideoClip
    alpha: AlphaSequence
    composite: VideoClip = field(default=None)

    def __post_init__(self):
        expected = composite(self.fg, self.bg, self.alpha)
        if self.composite is None:
            object.__setattr__(self, "composite", expected)
        elif not np.allclose(self.composite.frames, expected.frames, atol=1e-6, rtol=0):
            raise ValueError("composite does not match alpha * fg + (1 - alpha) * bg")


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "", axes=_AXES) -> None:
    """Raise :class:`ShapeMismatchError` naming the first axis on which ``a`` and ``b`` differ."""
    if a.ndim != b.ndim:
        raise ShapeMismatchError("ndim", a.ndim, b.ndim, what)
    for i, (la, lb) in enumerate(zip(a.shape, b.shape)):
        if la != lb:
            name = axes[i] if i < len(axes) else str(i)
            raise ShapeMismatchError(name, la, lb, what)


def composite(fg, bg, alpha) -> VideoClip:
    """Blend ``fg`` over ``bg`` with per-pixel opacity ``alpha``."""
    f = _as_array(fg).astype(np.float64)
    b = _as_array(bg).astype(np.float64)
    a = _as_array(alpha).astype(np.float64)
    check_same_shape(f, b, "fg/bg")
    check_same_shape(f[..., 0], a, "fg/alpha")
    a = a[..., None]
    out = a * f + (1.0 - a) * b
    return VideoClip(np.clip(out, 0.0, 1.0))


def to_codec_range(x):
    """Map [0, 1] to the codec's [-1, 1] range."""
    arr = _as_array(x)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise RangeError(f"expected values in [0, 1], got [{arr.min()}, {arr.max()}]")
    return 2.0 * arr - 1.0


def from_codec_range(y):
    """Inverse of :func:`to_codec_range`, clamped to [0, 1].

    Works on numpy arrays and torch tensors; the torch path stays differentiable
    inside the valid range.
    """
    if hasattr(y, "clamp"):
        return ((y + 1.0) / 2.0).clamp(0.0, 1.0)
    return np.clip((np.asarray(y) + 1.0) / 2.0, 0.0, 1.0)


def binarize_alpha(alpha, threshold: float = 0.5) -> AlphaSequence:
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    a = _as_array(alpha)
    return AlphaSequence((a >= threshold).astype(np.float64))


# -- 8-bit PNG serialisation -------------------------------------------------


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write_png(path: Path, arr: np.ndarray) -> None:
    # fixed compression level keeps the bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", compress_level=6)


def write_frames(directory, frames: np.ndarray) -> None:
    """Write T frames as ``%05d.png`` (3-channel for colour, 1-channel for alpha)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        _write_png(directory / f"{i:05d}.png", quantize(frame))


def read_frames(directory) -> np.ndarray:
    directory = Path(directory)
    files = sorted(directory.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = [np.asarray(Image.open(f)) for f in files]
    return np.stack(frames).astype(np.float64) / 255.0


def write_clip(directory, rgb=None, alpha=None) -> None:
    directory = Path(directory)
    if rgb is not None:
        write_frames(directory / "rgb", _as_array(rgb))
    if alpha is not None:
        write_frames(directory / "alpha", _as_array(alpha))


def read_clip(directory) -> tuple[VideoClip, Optional[AlphaSequence]]:
    directory = Path(directory)
    rgb = VideoClip(read_frames(directory / "rgb"))
    alpha = None
    if (directory / "alpha").is_dir():
        alpha = AlphaSequence(read_frames(directory / "alpha"))
    return rgb, alpha
