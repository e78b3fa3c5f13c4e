"""Procedural composite-video datasets.

Foregrounds are analytic shapes (disks, capsules, rectangles and bundles of
thin Bezier strands) rendered with 4x4 supersampled coverage, so thin strands
produce genuinely fractional alpha. Backgrounds are smooth gradients or
band-limited noise that drift over time. Clips are stored as 8-bit PNG frames
plus a versioned ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import (ParameterError, binarize_alpha, composite, quantize, read_frames,
                   write_frames)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SUPERSAMPLE = 4
SHAPES = ("disk", "capsule", "rect", "strand-bundle")
BACKGROUND_MODES = ("gradient", "band-limited-noise", "image-sequence")


class SpecError(ValueError):
    pass


@dataclass
class Motion:
    kind: str = "linear"  # linear | sinusoidal
    velocity: tuple = (0.0, 0.0)  # px / frame
    amplitude: tuple = (0.0, 0.0)  # px
    frequency: float = 0.0  # cycles / frame
    phase: float = 0.0

    def offset(self, t: float) -> np.ndarray:
        if self.kind == "linear":
            return np.asarray(self.velocity, dtype=np.float64) * t
        if self.kind == "sinusoidal":
            return np.asarray(self.amplitude, dtype=np.float64) * math.sin(2 * math.pi * self.frequency * t + self.phase)
        raise SpecError(f"unknown motion kind {self.kind!r}")


@dataclass
class Element:
    shape: str = "disk"
    center: tuple = (32.0, 32.0)  # (x, y) px at t=0
    size: tuple = (10.0, 10.0)  # disk: (r, -); capsule: (half_length, r); rect: (half_w, half_h)
    angle: float = 0.0
    edge_softness: float = 0.75  # px
    color: tuple = (0.8, 0.3, 0.2)
    texture_period: float = 4.0  # px; 0 disables the stripe texture
    texture_contrast: float = 0.25
    strand_count: int = 0
    strand_width: float = 1.0  # px
    strand_length: float = 12.0  # px
    strand_spread: float = 1.0  # radians
    sway: float = 1.5  # px amplitude of the wind-like sway
    motion: Motion = field(default_factory=Motion)

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}")
        if self.shape == "strand-bundle":
            if self.strand_count < 1 or self.strand_width <= 0 or self.strand_length <= 0:
                raise SpecError("strand bundles need strand_count >= 1 and positive width/length")
            if self.edge_softness <= 0:
                raise SpecError("strands need edge_softness > 0")
        elif min(self.size[: 1 if self.shape == "disk" else 2]) <= 0:
            raise SpecError(f"degenerate {self.shape}: size {self.size}")
        if self.edge_softness < 0:
            raise SpecError("edge_softness must be >= 0")


@dataclass
class Background:
    mode: str = "gradient"
    colors: tuple = ((0.2, 0.3, 0.5), (0.6, 0.6, 0.4))
    angle: float = 0.0
    drift: tuple = (0.5, 0.0)  # px / frame
    noise_sigma: float = 6.0  # px, band limit of the noise mode
    seed: int = 0
    frames: Optional[np.ndarray] = None  # image-sequence mode: T x H x W x 3

    def validate(self) -> None:
        if self.mode not in BACKGROUND_MODES:
            raise SpecError(f"unknown background mode {self.mode!r}")
        if self.mode == "image-sequence" and self.frames is None:
            raise SpecError("image-sequence backgrounds need frames")


@dataclass
class SceneSpec:
    seed: int = 0
    elements: list = field(default_factory=list)
    background: Background = field(default_factory=Background)
    duration: int = 8
    height: int = 64
    width: int = 64

    def validate(self) -> None:
        if self.duration < 1 or self.height < 8 or self.width < 8:
            raise SpecError("scene needs T >= 1 and H, W >= 8")
        for el in self.elements:
            el.validate()
            x, y = el.center
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise SpecError(f"element centre {el.center} outside the frame at t=0")
        self.background.validate()


# -- signed distances -------------------------------------------------------


def _rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return c, s


def _sdf_disk(px, py, cx, cy, r):
    return np.hypot(px - cx, py - cy) - r


def _sdf_capsule(px, py, cx, cy, half, r, angle):
    c, s = _rot(angle)
    ax, ay = cx - half * c, cy - half * s
    bx, by = cx + half * c, cy + half * s
    return _dist_segments(px, py, np.array([[ax, ay]]), np.array([[bx, by]])) - r


def _sdf_rect(px, py, cx, cy, hw, hh, angle):
    c, s = _rot(angle)
    dx, dy = px - cx, py - cy
    lx = np.abs(c * dx + s * dy) - hw
    ly = np.abs(-s * dx + c * dy) - hh
    outside = np.hypot(np.maximum(lx, 0), np.maximum(ly, 0))
    inside = np.minimum(np.maximum(lx, ly), 0)
    return outside + inside


def _dist_segments(px, py, a, b):
    """Distance from points to the nearest of the segments a[k] -> b[k]."""
    best = np.full(np.shape(px), np.inf)
    for (ax, ay), (bx, by) in zip(a, b):
        abx, aby = bx - ax, by - ay
        denom = max(abx * abx + aby * aby, 1e-12)
        u = np.clip(((px - ax) * abx + (py - ay) * aby) / denom, 0.0, 1.0)
        dx = px - (ax + u * abx)
        dy = py - (ay + u * aby)
        np.minimum(best, dx * dx + dy * dy, out=best)
    return np.sqrt(best)


def _bezier(p0, p1, p2, n=12):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2


def _coverage(sdf, softness):
    if softness <= 0:
        return (sdf <= 0).astype(np.float64)
    return np.clip(0.5 - sdf / softness, 0.0, 1.0)


def _strand_curves(el: Element, t: float, rng_seed: int):
    """Per-strand Bezier polylines for an element at time ``t`` (deterministic)."""
    rng = np.random.default_rng(rng_seed)
    root = np.asarray(el.center, dtype=np.float64) + el.motion.offset(t)
    curves = []
    for k in range(el.strand_count):
        theta = el.angle + rng.uniform(-el.strand_spread / 2, el.strand_spread / 2)
        length = el.strand_length * rng.uniform(0.7, 1.2)
        bend = rng.uniform(-0.35, 0.35)
        phase = rng.uniform(0, 2 * math.pi)
        jitter = rng.normal(0, 0.8, size=2)
        d = np.array([math.cos(theta), math.sin(theta)])
        n = np.array([-d[1], d[0]])
        sway = el.sway * math.sin(2 * math.pi * 0.08 * t + phase)
        p0 = root + jitter
        p1 = p0 + d * length * 0.5 + n * (bend * length + 0.5 * sway)
        p2 = p0 + d * length + n * sway
        curves.append(_bezier(p0, p1, p2))
    return curves


def _element_coverage(el: Element, t: float, H: int, W: int, seed: int) -> np.ndarray:
    ss = SUPERSAMPLE
    ys = (np.arange(H * ss) + 0.5) / ss
    xs = (np.arange(W * ss) + 0.5) / ss
    cx, cy = np.asarray(el.center, dtype=np.float64) + el.motion.offset(t)
    if el.shape == "strand-bundle":
        cov = np.zeros((H * ss, W * ss))
        half = el.strand_width / 2 + el.edge_softness
        for curve in _strand_curves(el, t, seed):
            x0, y0 = curve.min(0) - half - 1
            x1, y1 = curve.max(0) + half + 1
            c0, c1 = np.searchsorted(xs, [x0, x1])
            r0, r1 = np.searchsorted(ys, [y0, y1])
            if c1 <= c0 or r1 <= r0:
                continue
            py, px = np.meshgrid(ys[r0:r1], xs[c0:c1], indexing="ij")
            d = _dist_segments(px, py, curve[:-1], curve[1:]) - el.strand_width / 2
            local = _coverage(d, el.edge_softness)
            region = cov[r0:r1, c0:c1]
            cov[r0:r1, c0:c1] = 1 - (1 - region) * (1 - local)
    else:
        cov = np.zeros((H * ss, W * ss))
        if el.shape == "disk":
            reach = el.size[0]
        elif el.shape == "capsule":
            reach = el.size[0] + el.size[1]
        else:
            reach = math.hypot(el.size[0], el.size[1])
        reach += el.edge_softness + 1
        c0, c1 = np.searchsorted(xs, [cx - reach, cx + reach])
        r0, r1 = np.searchsorted(ys, [cy - reach, cy + reach])
        if c1 > c0 and r1 > r0:
            py, px = np.meshgrid(ys[r0:r1], xs[c0:c1], indexing="ij")
            if el.shape == "disk":
                d = _sdf_disk(px, py, cx, cy, el.size[0])
            elif el.shape == "capsule":
                d = _sdf_capsule(px, py, cx, cy, el.size[0], el.size[1], el.angle)
            else:
                d = _sdf_rect(px, py, cx, cy, el.size[0], el.size[1], el.angle)
            cov[r0:r1, c0:c1] = _coverage(d, el.edge_softness)
    return cov.reshape(H, ss, W, ss).mean(axis=(1, 3))


def _element_color(el: Element, t: float, H: int, W: int) -> np.ndarray:
    base = np.broadcast_to(np.asarray(el.color, dtype=np.float64), (H, W, 3))
    if el.texture_period <= 0 or el.texture_contrast == 0:
        return np.clip(base, 0, 1)
    cx, cy = np.asarray(el.center, dtype=np.float64) + el.motion.offset(t)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    c, s = _rot(el.angle + 0.7)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    pattern = np.sin(2 * math.pi * u / el.texture_period) * np.sin(2 * math.pi * v / (1.7 * el.texture_period))
    return np.clip(base + el.texture_contrast * np.sign(pattern)[..., None], 0, 1)


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render the foreground colour (T,H,W,3) and its alpha (T,H,W)."""
    spec.validate()
    T, H, W = spec.duration, spec.height, spec.width
    fg = np.full((T, H, W, 3), 0.5)
    alpha = np.zeros((T, H, W))
    for ti in range(T):
        acc_c = np.zeros((H, W, 3))
        acc_a = np.zeros((H, W))
        for k, el in enumerate(spec.elements):
            a = _element_coverage(el, float(ti), H, W, seed=_derive(spec.seed, k))
            col = _element_color(el, float(ti), H, W)
            # "over" compositing of premultiplied layers, later elements on top
            acc_c = a[..., None] * col + (1 - a[..., None]) * acc_c
            acc_a = a + (1 - a) * acc_a
        covered = acc_a > 0
        fg[ti][covered] = np.clip(acc_c[covered] / acc_a[covered][:, None], 0, 1)
        alpha[ti] = np.clip(acc_a, 0, 1)
    return fg, alpha


def render_background(bg: Background, T: int, H: int, W: int) -> np.ndarray:
    bg.validate()
    if bg.mode == "image-sequence":
        frames = np.asarray(bg.frames, dtype=np.float64)
        if frames.shape[1:3] != (H, W):
            raise SpecError(f"background frames {frames.shape[1:3]} do not match {(H, W)}")
        idx = np.arange(T) % len(frames)
        return np.clip(frames[idx], 0, 1)
    c0 = np.asarray(bg.colors[0], dtype=np.float64)
    c1 = np.asarray(bg.colors[1], dtype=np.float64)
    drift = np.asarray(bg.drift, dtype=np.float64)
    out = np.empty((T, H, W, 3))
    if bg.mode == "gradient":
        yy, xx = np.mgrid[0:H, 0:W] + 0.5
        c, s = _rot(bg.angle)
        span = abs(c) * W + abs(s) * H
        for ti in range(T):
            ox, oy = drift * ti
            u = ((xx - ox) * c + (yy - oy) * s) / span
            ramp = 0.5 + 0.5 * np.sin(math.pi * u)
            out[ti] = c0 + (c1 - c0) * ramp[..., None]
        return np.clip(out, 0, 1)
    # band-limited noise on a padded canvas, cropped along the drift path
    pad = int(np.ceil(np.abs(drift).max() * T)) + 2
    rng = np.random.default_rng(bg.seed)
    canvas = rng.normal(size=(H + 2 * pad, W + 2 * pad, 3))
    canvas = ndimage.gaussian_filter(canvas, sigma=(bg.noise_sigma, bg.noise_sigma, 0), mode="wrap")
    canvas = (canvas - canvas.mean()) / (canvas.std() + 1e-12)
    weight = 0.5 + 0.25 * np.clip(canvas.mean(-1, keepdims=True), -2, 2)
    canvas = c0 * (1 - weight) + c1 * weight + 0.08 * canvas
    for ti in range(T):
        ox, oy = np.rint(drift * ti).astype(int)
        out[ti] = canvas[pad + oy: pad + oy + H, pad + ox: pad + ox + W]
    return np.clip(out, 0, 1)


# -- dataset persistence ----------------------------------------------------


def _derive(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class DatasetManifest:
    name: str
    kind: str  # matte | segmentation
    clips: list = field(default_factory=list)  # [{"path", "T", "H", "W", "seed"}]
    seed: int = 0
    format_version: int = FORMAT_VERSION
    root: Path = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("matte", "segmentation"):
            raise ValueError(f"kind must be 'matte' or 'segmentation', got {self.kind!r}")

    def to_json(self) -> str:
        blob = {k: v for k, v in asdict(self).items() if k != "root"}
        return json.dumps(blob, indent=2, sort_keys=True)

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        blob = json.loads(path.read_text())
        if blob.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest version {blob.get('format_version')}")
        return cls(root=path.parent, **blob)

    def validate(self) -> None:
        for clip in self.clips:
            base = Path(self.root) / clip["path"]
            if not (base / "rgb").is_dir() or not (base / "alpha").is_dir():
                raise FileNotFoundError(f"clip {clip['path']} is missing rgb/ or alpha/")


def compose_dataset(specs: Sequence[SceneSpec], root, name: str, kind: str = "matte",
                    backgrounds: Optional[Sequence] = None, seed: int = 0,
                    label_noise: float = 0.0) -> DatasetManifest:
    """Render, composite and write every spec; one composite per clip.

    ``backgrounds`` optionally overrides each spec's background with a
    :class:`Background` or a T x H x W x 3 array. ``label_noise`` is the
    per-frame probability of dropping one element from the written label,
    mimicking imperfect pseudo-labels (segmentation kind only).
    """
    if not specs:
        raise ValueError("compose_dataset needs at least one scene")
    if kind not in ("matte", "segmentation"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(name=name, kind=kind, seed=seed, root=root)
    for i, spec in enumerate(specs):
        clip_id = f"clip_{i:04d}"
        try:
            fg, alpha = render_scene(spec)
            bg_src = spec.background if backgrounds is None else backgrounds[i]
            if isinstance(bg_src, Background):
                bg = render_background(bg_src, spec.duration, spec.height, spec.width)
            else:
                bg = render_background(Background(mode="image-sequence", frames=np.asarray(bg_src)),
                                       spec.duration, spec.height, spec.width)
            rgb = composite(fg, bg, alpha).frames
            label = alpha
            if kind == "segmentation":
                if label_noise > 0 and len(spec.elements) > 1:
                    label = _noisy_label(spec, alpha, label_noise)
                label = binarize_alpha(label, 0.5).alphas
            write_frames(root / clip_id / "rgb", rgb)
            write_frames(root / clip_id / "alpha", label)
        except OSError as exc:
            raise OSError(f"failed writing clip {clip_id}: {exc}") from exc
        manifest.clips.append({"path": clip_id, "T": spec.duration, "H": spec.height,
                               "W": spec.width, "seed": spec.seed})
    manifest.save()
    return manifest


def _noisy_label(spec: SceneSpec, alpha: np.ndarray, p: float) -> np.ndarray:
    """Drop one element from the label in a random subset of frames."""
    rng = np.random.default_rng(_derive(spec.seed, 10_000))
    label = alpha.copy()
    for ti in range(spec.duration):
        if rng.uniform() >= p:
            continue
        drop = int(rng.integers(len(spec.elements)))
        acc = np.zeros((spec.height, spec.width))
        for k, el in enumerate(spec.elements):
            if k != drop:
                a = _element_coverage(el, float(ti), spec.height, spec.width, seed=_derive(spec.seed, k))
                acc = a + (1 - a) * acc
        label[ti] = acc
    return label


class ClipDataset:
    """Random access to the clips of a manifest, cached as uint8 in memory."""

    def __init__(self, manifest, pixel_loss: Optional[bool] = None):
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.load(manifest)
        self.manifest = manifest
        self.kind = manifest.kind
        self.name = manifest.name
        self.pixel_loss = (manifest.kind == "matte") if pixel_loss is None else pixel_loss
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def from_arrays(cls, rgbs, alphas, name="memory", kind=None):
        alphas = [np.asarray(a, dtype=np.float64) for a in alphas]
        if kind is None:
            binary = all(np.isin(quantize(a), (0, 255)).all() for a in alphas)
            kind = "segmentation" if binary else "matte"
        ds = cls(DatasetManifest(name=name, kind=kind,
                                 clips=[{"path": f"mem_{i}", "T": len(r), "H": r.shape[1], "W": r.shape[2]}
                                        for i, r in enumerate(rgbs)]))
        for i, (r, a) in enumerate(zip(rgbs, alphas)):
            ds._cache[i] = (quantize(r), quantize(a))
        return ds

    def __len__(self):
        return len(self.manifest.clips)

    def load_uint8(self, i: int):
        if i not in self._cache:
            base = Path(self.manifest.root) / self.manifest.clips[i]["path"]
            rgb = quantize(read_frames(base / "rgb"))
            alpha = quantize(read_frames(base / "alpha"))
            self._cache[i] = (rgb, alpha)
        return self._cache[i]

    def load(self, i: int):
        rgb, alpha = self.load_uint8(i)
        return rgb.astype(np.float32) / 255.0, alpha.astype(np.float32) / 255.0


# -- sampling ---------------------------------------------------------------


@dataclass
class MixtureEntry:
    dataset: object  # ClipDataset or manifest path
    ratio: float
    pixel_loss_enabled: bool = True


@dataclass
class MixtureConfig:
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise ValueError("mixture needs at least one entry")
        ratios = np.array([e.ratio for e in self.entries], dtype=np.float64)
        if np.any(ratios <= 0):
            raise ValueError("mixture ratios must be positive")
        if abs(ratios.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture ratios must sum to 1, got {ratios.sum()}")


class MixtureSampler:
    """Categorical draw of a dataset per batch element, then a uniform clip within it."""

    def __init__(self, cfg: MixtureConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.datasets = []
        for e in cfg.entries:
            ds = e.dataset if isinstance(e.dataset, ClipDataset) else ClipDataset(e.dataset)
            if len(ds) == 0:
                raise ValueError(f"mixture entry {ds.name!r} has no clips")
            self.datasets.append(ds)
        self.probs = np.array([e.ratio for e in cfg.entries], dtype=np.float64)

    def draw(self):
        """Returns ``(entry_index, clip_index, pixel_loss_enabled)``."""
        k = int(self.rng.choice(len(self.probs), p=self.probs))
        i = int(self.rng.integers(len(self.datasets[k])))
        return k, i, bool(self.cfg.entries[k].pixel_loss_enabled)

    def __iter__(self) -> Iterator:
        while True:
            k, i, pix = self.draw()
            yield self.datasets[k].load(i), pix


def mixture_sampler(cfg: MixtureConfig, rng: np.random.Generator) -> Iterator:
    return iter(MixtureSampler(cfg, rng))


def sample_sequence_length(rng: np.random.Generator, min_len: int = 1, max_len: int = 12,
                           resolution: Optional[tuple] = None, pixel_budget: Optional[int] = None) -> int:
    """Uniform integer in [min_len, max_len].

    With ``pixel_budget`` and ``resolution`` the upper end shrinks so that
    ``length * H * W <= pixel_budget``: long sequences only at low resolution.
    """
    if min_len > max_len:
        raise ParameterError(f"min_len {min_len} > max_len {max_len}")
    hi = max_len
    if pixel_budget is not None and resolution is not None:
        hi = max(min_len, min(max_len, pixel_budget // (resolution[0] * resolution[1])))
    return int(rng.integers(min_len, hi + 1))


def crop_resize_batch(arrays: Sequence[np.ndarray], target: tuple, length: int,
                      rng: np.random.Generator, scale_range=(0.6, 1.0), spatial_factor: int = 4):
    """Apply one random temporal window + spatial crop/resize to every array.

    Each array is T x H x W or T x H x W x C with shared T, H, W. Returns
    float32 arrays shaped (length, th, tw[, C]).
    """
    th, tw = target
    if th % spatial_factor or tw % spatial_factor:
        raise ParameterError(f"target {target} not divisible by {spatial_factor}")
    T, H, W = arrays[0].shape[:3]
    for a in arrays[1:]:
        if a.shape[:3] != (T, H, W):
            raise ValueError("arrays must share T, H, W")
    if T < length:
        warnings.warn(f"clip of {T} frames shorter than {length}; wrap-padding", stacklevel=2)
        idx = np.arange(length) % T
    else:
        start = int(rng.integers(0, T - length + 1))
        idx = np.arange(start, start + length)
    # largest crop with the target aspect ratio that fits, scaled down at random
    fit = min(H / th, W / tw)
    scale = rng.uniform(*scale_range) if scale_range[0] < scale_range[1] else scale_range[0]
    ch = max(1, min(H, int(round(th * fit * scale))))
    cw = max(1, min(W, int(round(tw * fit * scale))))
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    out = []
    for a in arrays:
        a = np.asarray(a)
        crop = a[idx, y0:y0 + ch, x0:x0 + cw].astype(np.float32)
        if (ch, cw) != (th, tw):
            x = torch.from_numpy(crop)
            chw = x.ndim == 4
            x = x.permute(0, 3, 1, 2) if chw else x[:, None]
            x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False, antialias=ch > th)
            x = x.permute(0, 2, 3, 1) if chw else x[:, 0]
            crop = x.clamp(0, 1).numpy()
        out.append(np.ascontiguousarray(crop))
    return out


# -- desk dataset presets ---------------------------------------------------

_HAIR_COLORS = ((0.12, 0.08, 0.05), (0.55, 0.35, 0.15), (0.9, 0.8, 0.55), (0.35, 0.2, 0.1))


def _rand_color(rng, lo=0.15, hi=0.85):
    return tuple(float(v) for v in rng.uniform(lo, hi, size=3))


def _motion(rng, kind=None, speed=1.0):
    kind = kind or ("linear" if rng.uniform() < 0.5 else "sinusoidal")
    if kind == "linear":
        return Motion("linear", velocity=tuple(rng.uniform(-speed, speed, 2)))
    return Motion("sinusoidal", amplitude=tuple(rng.uniform(-4, 4, 2) * speed),
                  frequency=float(rng.uniform(0.03, 0.12)), phase=float(rng.uniform(0, 2 * math.pi)))


def _background(rng, modes, seed):
    mode = modes[int(rng.integers(len(modes)))]
    return Background(mode=mode, colors=(_rand_color(rng, 0.1, 0.9), _rand_color(rng, 0.1, 0.9)),
                      angle=float(rng.uniform(0, math.pi)), drift=tuple(rng.uniform(-0.8, 0.8, 2)),
                      noise_sigma=float(rng.uniform(4, 8)), seed=seed)


def _body(rng, H, W, soft=(0.6, 1.2)):
    """A 'person' made of a torso capsule and a head disk."""
    cx = float(rng.uniform(0.3, 0.7) * W)
    cy = float(rng.uniform(0.45, 0.7) * H)
    r = float(rng.uniform(0.1, 0.16) * min(H, W))
    color = _rand_color(rng)
    period = float(rng.uniform(3.0, 5.0))
    motion = _motion(rng)
    torso = Element("capsule", (cx, min(H, cy + r)), (r * 1.2, r * 1.1), angle=math.pi / 2 + rng.uniform(-0.3, 0.3),
                    edge_softness=float(rng.uniform(*soft)), color=color, texture_period=period, motion=motion)
    head = Element("disk", (cx, max(0.0, cy - 1.2 * r)), (r * 0.85, 0), edge_softness=float(rng.uniform(*soft)),
                   color=_rand_color(rng, 0.4, 0.9), texture_period=period * 0.8, texture_contrast=0.15,
                   motion=motion)
    return [torso, head], (cx, max(0.0, cy - 1.2 * r)), r * 0.85, motion


def _hair(rng, head_center, head_r, motion, count_range=(8, 16), length_scale=1.0):
    hc = _HAIR_COLORS[int(rng.integers(len(_HAIR_COLORS)))]
    bundles = []
    for _ in range(int(rng.integers(1, 3))):
        angle = float(rng.uniform(-math.pi, 0))  # strands grow upwards/sideways
        root = (head_center[0] + head_r * 0.7 * math.cos(angle), head_center[1] + head_r * 0.7 * math.sin(angle))
        bundles.append(Element(
            "strand-bundle", root, (1, 1), angle=angle, edge_softness=float(rng.uniform(0.3, 0.7)),
            color=hc, texture_period=0, strand_count=int(rng.integers(*count_range)),
            strand_width=float(rng.uniform(0.6, 1.4)), strand_length=float(rng.uniform(8, 16) * length_scale),
            strand_spread=float(rng.uniform(0.6, 1.4)), sway=float(rng.uniform(0.5, 2.5)), motion=motion))
    return bundles


def _object(rng, H, W):
    shape = ("disk", "capsule", "rect")[int(rng.integers(3))]
    cx, cy = float(rng.uniform(0.25, 0.75) * W), float(rng.uniform(0.25, 0.75) * H)
    s = float(rng.uniform(0.08, 0.2) * min(H, W))
    size = (s, s * rng.uniform(0.4, 0.9)) if shape != "disk" else (s, 0.0)
    return Element(shape, (cx, cy), size, angle=float(rng.uniform(0, math.pi)),
                   edge_softness=float(rng.uniform(0.5, 1.0)), color=_rand_color(rng),
                   texture_period=float(rng.uniform(3.0, 5.0)), motion=_motion(rng, speed=1.5))


def scene_for(preset: str, seed: int, T: int, H: int, W: int) -> SceneSpec:
    """Scene recipes for the desk datasets.

    ``person``: textured body, hard-ish edges, some hair (segmentation data).
    ``object``: 1-3 textured rigid shapes (segmentation data).
    ``hair``: body with dense strand bundles on plain gradient backgrounds (matte data).
    ``composite``: body with a few strands on mixed backgrounds (matte data; also the test set).
    """
    rng = np.random.default_rng(seed)
    if preset == "object":
        els = [_object(rng, H, W) for _ in range(int(rng.integers(1, 4)))]
        bg = _background(rng, ("band-limited-noise", "gradient"), seed)
    elif preset == "person":
        els, hc, hr, mo = _body(rng, H, W)
        if rng.uniform() < 0.5:
            els += _hair(rng, hc, hr, mo, count_range=(4, 9))
        bg = _background(rng, ("band-limited-noise", "gradient"), seed)
    elif preset == "hair":
        els, hc, hr, mo = _body(rng, H, W, soft=(0.8, 1.5))
        els += _hair(rng, hc, hr, mo, count_range=(10, 20), length_scale=1.2)
        bg = _background(rng, ("gradient",), seed)
    elif preset == "composite":
        els, hc, hr, mo = _body(rng, H, W, soft=(0.8, 1.5))
        els += _hair(rng, hc, hr, mo, count_range=(4, 10))
        bg = _background(rng, ("band-limited-noise", "gradient"), seed)
    else:
        raise SpecError(f"unknown scene preset {preset!r}")
    return SceneSpec(seed=seed, elements=els, background=bg, duration=T, height=H, width=W)


def generate_preset(root, name: str, preset: str, kind: str, n_clips: int, seed: int,
                    T: int = 12, H: int = 80, W: int = 80, label_noise: float = 0.0) -> DatasetManifest:
    specs = [scene_for(preset, _derive(seed, i), T, H, W) for i in range(n_clips)]
    return compose_dataset(specs, Path(root) / name, name, kind=kind, seed=seed, label_noise=label_noise)


def soft_fraction(alpha: np.ndarray, lo: float = 0.05, hi: float = 0.95) -> float:
    a = np.asarray(alpha)
    return float(np.mean((a > lo) & (a < hi)))
