"""Per-frame convolutional autoencoder standing in for a frozen pre-trained VAE.

Only the spatial dimensions are compressed: every frame is encoded and decoded
independently, so the latent sequence keeps the clip's length.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeMismatchError, from_codec_range, to_codec_range
from .metrics import PSNR_CAP, psnr, ssim

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3


@dataclass
class CodecConfig:
    spatial_factor: int = 4
    latent_channels: int = 4
    hidden_channels: int = 48
    seed: int = 0
    iterations: int = 3000
    batch_size: int = 16
    learning_rate: float = 2e-3
    psnr_floor: float = 23.0
    holdout_fraction: float = 0.1
    crop_size: int = 32

    def __post_init__(self):
        s = int(self.spatial_factor)
        if s < 1 or s & (s - 1):
            raise ValueError(f"spatial_factor must be a power of two, got {s}")
        if min(self.latent_channels, self.hidden_channels, self.batch_size) < 1 or self.iterations < 0:
            raise ValueError("codec sizes must be positive and iterations non-negative")
        if self.learning_rate <= 0 or not 0 <= self.holdout_fraction < 1:
            raise ValueError("learning_rate must be > 0 and holdout_fraction in [0, 1)")
        if self.crop_size % s:
            raise ValueError(f"crop_size {self.crop_size} is not a multiple of spatial_factor {s}")


class _Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.hidden_channels
        layers = [nn.Conv2d(IMAGE_CHANNELS, ch, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(cfg.spatial_factor))):
            layers += [nn.Conv2d(ch, ch, 4, stride=2, padding=1), nn.SiLU(),
                       nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        layers += [nn.Conv2d(ch, cfg.latent_channels, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.hidden_channels
        layers = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(cfg.spatial_factor))):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(),
                       nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        layers += [nn.Conv2d(ch, IMAGE_CHANNELS, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class CodecParams(nn.Module):
    """Encoder/decoder weights plus the latent standardisation statistics."""

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            self.encoder = _Encoder(self.cfg)
            self.decoder = _Decoder(self.cfg)
        self.register_buffer("latent_mean", torch.zeros(self.cfg.latent_channels))
        self.register_buffer("latent_std", torch.ones(self.cfg.latent_channels))

    @property
    def spatial_factor(self) -> int:
        return self.cfg.spatial_factor

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # frame-batched primitives; x: (N, 3, H, W) in [-1, 1]
    def encode_frames(self, x):
        z = self.encoder(x)
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def decode_frames(self, z):
        z = z * self.latent_std[:, None, None] + self.latent_mean[:, None, None]
        return self.decoder(z)


@dataclass
class LatentSequence:
    """Codes shaped T x h x w x c (or B x T x h x w x c for batches)."""

    codes: torch.Tensor
    spatial_factor: int

    def __post_init__(self):
        if not torch.isfinite(self.codes).all():
            raise ValueError("latent codes must be finite")

    @property
    def shape(self):
        return tuple(self.codes.shape)


def _to_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _lift_channels(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Accept (..., H, W, 3) colour or (..., H, W) matte; returns (..., H, W, 3)."""
    if x.shape[-1] == IMAGE_CHANNELS and x.ndim >= 4:
        return x, False
    return x.unsqueeze(-1).expand(*x.shape, IMAGE_CHANNELS), True


def encode(x, params: CodecParams) -> LatentSequence:
    """Encode a clip (T,H,W,3) or matte (T,H,W) already in [-1, 1].

    A leading batch axis is allowed. Each frame is encoded on its own.
    """
    x = _to_tensor(x, next(params.parameters()).dtype)
    x, _ = _lift_channels(x)
    s = params.spatial_factor
    H, W = x.shape[-3], x.shape[-2]
    if H % s or W % s:
        raise ShapeMismatchError("H" if H % s else "W", H if H % s else W,
                                 f"a multiple of {s}", "encode")
    lead = x.shape[:-3]
    frames = x.reshape(-1, H, W, IMAGE_CHANNELS).permute(0, 3, 1, 2)
    z = params.encode_frames(frames)
    z = z.permute(0, 2, 3, 1).reshape(*lead, H // s, W // s, params.latent_channels)
    return LatentSequence(z, s)


def decode(z, params: CodecParams, matte: bool = False) -> torch.Tensor:
    """Decode latents to codec range; ``matte=True`` averages the output channels."""
    codes = z.codes if isinstance(z, LatentSequence) else z
    lead = codes.shape[:-3]
    h, w, c = codes.shape[-3:]
    frames = codes.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    out = params.decode_frames(frames).permute(0, 2, 3, 1)
    out = out.reshape(*lead, out.shape[1], out.shape[2], IMAGE_CHANNELS)
    return out.mean(-1) if matte else out


# -- training ---------------------------------------------------------------


@dataclass
class CodecTrainResult:
    params: CodecParams
    holdout_psnr: float
    floor: float
    iterations: int

    @property
    def floor_met(self) -> bool:
        return self.holdout_psnr >= self.floor


class CodecConvergenceError(RuntimeError):
    def __init__(self, achieved: float, floor: float):
        self.achieved = achieved
        self.floor = floor
        super().__init__(f"codec PSNR {achieved:.2f} dB below floor {floor:.2f} dB")


def _frame_pool(datasets) -> np.ndarray:
    """Stack every rgb frame and every (channel-replicated) alpha frame, in [0, 1]."""
    pool = []
    for ds in datasets:
        for i in range(len(ds)):
            rgb, alpha = ds.load(i)
            pool.append(rgb)
            pool.append(np.repeat(alpha[..., None], IMAGE_CHANNELS, axis=-1))
    if not pool:
        raise ValueError("codec training needs a non-empty dataset")
    return np.concatenate(pool).astype(np.float32)


def _split(n: int, fraction: float, seed: int):
    idx = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(round(n * fraction))) if n > 1 else 0
    return idx[n_hold:], idx[:n_hold]


def _chunks(frames: np.ndarray, size: int = 64):
    for i in range(0, len(frames), size):
        yield torch.from_numpy(to_codec_range(frames[i:i + size])).permute(0, 3, 1, 2)


@torch.no_grad()
def _roundtrip_psnr(params: CodecParams, frames: np.ndarray) -> float:
    if len(frames) == 0:
        return float("nan")
    outs = [from_codec_range(params.decode_frames(params.encode_frames(x))) for x in _chunks(frames)]
    out = torch.cat(outs).permute(0, 2, 3, 1).double().numpy()
    return psnr(out, frames.astype(np.float64))


@torch.no_grad()
def _fit_latent_stats(params: CodecParams, frames: np.ndarray) -> None:
    # per-channel moments accumulated in float64 over frame chunks
    n, s1, s2 = 0, 0.0, 0.0
    for x in _chunks(frames):
        z = params.encoder(x).double()
        n += z.shape[0] * z.shape[2] * z.shape[3]
        s1 = s1 + z.sum(dim=(0, 2, 3))
        s2 = s2 + (z * z).sum(dim=(0, 2, 3))
    mean = s1 / n
    var = (s2 - n * mean * mean) / max(n - 1, 1)
    params.latent_mean.copy_(mean.float())
    params.latent_std.copy_(var.clamp_min(0).sqrt().float().clamp_min(1e-3))


def _random_crops(frames: np.ndarray, pick: np.ndarray, size: int, gen: np.random.Generator) -> np.ndarray:
    H, W = frames.shape[1:3]
    size = min(size, H, W)
    ys = gen.integers(0, H - size + 1, size=len(pick))
    xs = gen.integers(0, W - size + 1, size=len(pick))
    return np.stack([frames[p, y:y + size, x:x + size] for p, y, x in zip(pick, ys, xs)])


def train_codec(datasets, cfg: CodecConfig | None = None, strict: bool = False) -> CodecTrainResult:
    """Train the autoencoder on every frame of ``datasets`` and freeze it.

    ``datasets`` is a sequence of objects with ``__len__`` and ``load(i)``
    returning ``(rgb, alpha)``. Seeded and deterministic on one device.
    """
    cfg = cfg or CodecConfig()
    frames = _frame_pool(datasets)
    train_idx, hold_idx = _split(len(frames), cfg.holdout_fraction, cfg.seed)
    params = CodecParams(cfg)
    gen = np.random.default_rng(cfg.seed)
    if cfg.iterations > 0:
        opt = torch.optim.Adam(params.parameters(), lr=cfg.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iterations)
        params.train()
        for it in range(cfg.iterations):
            pick = train_idx[gen.integers(0, len(train_idx), size=cfg.batch_size)]
            x = torch.from_numpy(to_codec_range(_random_crops(frames, pick, cfg.crop_size, gen))).permute(0, 3, 1, 2)
            recon = params.decoder(params.encoder(x))
            loss = F.mse_loss(recon, x) + 0.5 * F.l1_loss(recon, x)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            if it % 250 == 0:
                logger.info("codec it=%d loss=%.5f", it, loss.item())
        _fit_latent_stats(params, frames[train_idx])
    params.freeze()
    held = _roundtrip_psnr(params, frames[hold_idx])
    result = CodecTrainResult(params, held, cfg.psnr_floor, cfg.iterations)
    if not result.floor_met:
        logger.warning("codec floor unmet: %.2f dB < %.2f dB", held, cfg.psnr_floor)
        if strict:
            raise CodecConvergenceError(held, cfg.psnr_floor)
    return result


# -- persistence ------------------------------------------------------------


def save_codec(params: CodecParams, path, extra: dict | None = None) -> None:
    torch.save({**(extra or {}), "config": asdict(params.cfg), "state": params.state_dict()}, path)


def load_codec(path) -> CodecParams:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    params = CodecParams(CodecConfig(**blob["config"]))
    params.load_state_dict(blob["state"])
    return params.freeze()


# -- reconstruction report --------------------------------------------------


@torch.no_grad()
def codec_report(datasets: dict, params: CodecParams) -> list[dict]:
    """PSNR / SSIM of the round trip per named split (rgb and alpha frames pooled)."""
    rows = []
    for name, ds in datasets.items():
        if ds is None or len(ds) == 0:
            logger.warning("split %s is empty; row omitted", name)
            continue
        psnrs, ssims = [], []
        for i in range(len(ds)):
            rgb, alpha = ds.load(i)
            for target, is_matte in ((rgb, False), (alpha, True)):
                z = encode(to_codec_range(target), params)
                out = from_codec_range(decode(z, params, matte=is_matte)).double().numpy()
                psnrs.append(psnr(out, target))
                ssims.append(ssim(out, target))
        rows.append({"split": name, "psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))})
    return rows


def format_codec_report(rows: list[dict]) -> str:
    names = [r["split"] for r in rows]
    width = max([6] + [len(n) for n in names])
    header = "Metric | " + " | ".join(n.rjust(width) for n in names)
    lines = [header, "-" * len(header)]
    lines.append("PSNR   | " + " | ".join(f"{r['psnr']:{width}.2f}" for r in rows))
    lines.append("SSIM   | " + " | ".join(f"{r['ssim']:{width}.4f}" for r in rows))
    lines.append(f"(PSNR of a perfect reconstruction is capped at {PSNR_CAP:g} dB)")
    return "\n".join(lines)


def write_codec_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["split", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows)
