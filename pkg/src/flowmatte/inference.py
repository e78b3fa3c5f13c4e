"""Few-step matte inference: encode the clip, integrate the learned field, decode."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .codec import CodecParams, decode, encode
from .core import AlphaSequence, VideoClip, from_codec_range, to_codec_range
from .denoiser import VideoDenoiser
from .flow import SamplerConfig, euler_sample


@dataclass(frozen=True)
class Chunking:
    length: int = 12
    overlap: int = 2

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("chunk length must be >= 1")
        if not 0 <= self.overlap < self.length:
            raise ValueError("overlap must be in [0, length)")


def chunk_spans(T: int, chunking: Chunking) -> list[tuple[int, int]]:
    """Half-open frame windows covering ``[0, T)``; consecutive windows share ``overlap`` frames."""
    if T <= chunking.length:
        return [(0, T)]
    stride = chunking.length - chunking.overlap
    spans = []
    start = 0
    while True:
        end = min(start + chunking.length, T)
        spans.append((start, end))
        if end == T:
            return spans
        start += stride


def _pad_amounts(H: int, W: int, s: int):
    return (-H) % s, (-W) % s


def velocity_field(model: VideoDenoiser):
    def fn(phi, z_c, t):
        return model(phi, z_c, float(t))
    return fn


def clip_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Starting noise for a whole clip; chunks take their frame slice of it."""
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=dtype)


@torch.no_grad()
def sample_chunk(model: VideoDenoiser, codec: CodecParams, z_c: torch.Tensor, noise: torch.Tensor,
                 steps: int) -> torch.Tensor:
    """Integrate one chunk of condition latents (T, h, w, c) and decode to mattes (T, H, W)."""
    z = euler_sample(velocity_field(model), z_c, SamplerConfig(steps=steps), noise=noise)
    return from_codec_range(decode(z, codec, matte=True))


def _as_frames(clip) -> np.ndarray:
    if isinstance(clip, VideoClip):
        return clip.frames
    arr = np.asarray(clip, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected a T x H x W x 3 clip, got {arr.shape}")
    return arr


@torch.no_grad()
def infer(clip, model: VideoDenoiser, codec: CodecParams, sampler: SamplerConfig = SamplerConfig(),
          chunking: Chunking = Chunking()) -> AlphaSequence:
    """Predict a matte for every frame of ``clip`` (T x H x W x 3 in [0, 1])."""
    frames = _as_frames(clip)
    if frames.shape[0] == 0:
        raise ValueError("cannot infer on an empty clip")
    model.eval()
    T, H, W, _ = frames.shape
    s = codec.spatial_factor
    ph, pw = _pad_amounts(H, W, s)
    x = torch.from_numpy(np.asarray(to_codec_range(frames), dtype=np.float32))
    if ph or pw:
        mode = "reflect" if ph < H and pw < W else "replicate"
        x = F.pad(x.permute(0, 3, 1, 2), (0, pw, 0, ph), mode=mode).permute(0, 2, 3, 1)
    z_c = encode(x, codec).codes
    noise = clip_noise(z_c.shape, sampler.seed, z_c.dtype)
    out = torch.zeros(T, H + ph, W + pw, dtype=torch.float64)
    weight = torch.zeros(T, dtype=torch.float64)
    for a, b in chunk_spans(T, chunking):
        alpha = sample_chunk(model, codec, z_c[a:b], noise[a:b], sampler.steps).to(torch.float64)
        w = _blend_weights(a, b, T, chunking.overlap)
        out[a:b] += w[:, None, None] * alpha
        weight[a:b] += w
    out = out / weight[:, None, None]
    return AlphaSequence(out[:, :H, :W].clamp(0, 1).numpy())


def _blend_weights(a: int, b: int, T: int, overlap: int) -> torch.Tensor:
    """Linear ramps over the shared frames; 1 elsewhere."""
    n = b - a
    w = torch.ones(n, dtype=torch.float64)
    if overlap == 0:
        return w
    ramp = torch.arange(1, overlap + 1, dtype=torch.float64) / (overlap + 1)
    k = min(overlap, n)
    if a > 0:
        w[:k] = ramp[:k]
    if b < T:
        w[n - k:] = torch.minimum(w[n - k:], ramp.flip(0)[overlap - k:])
    return w


def timing_report(clip, model: VideoDenoiser, codec: CodecParams, steps=(1, 2, 3, 5, 10, 25),
                  seed: int = 0, repeats: int = 1) -> list[dict]:
    """Wall time per clip against Euler step count."""
    rows = []
    for n in steps:
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            infer(clip, model, codec, SamplerConfig(steps=n, seed=seed))
            best = min(best, time.perf_counter() - t0)
        rows.append({"steps": n, "seconds": best, "frames": len(_as_frames(clip))})
    return rows
