"""Factored 3D U-Net velocity model.

Spatial work is done by 2D convolutions applied frame by frame; frames only
exchange information through 1D temporal convolutions (``TemporalBlock``).
That split is what makes the spatial/temporal parameter partition well
defined, which the staged training relies on.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    cond_channels: int = 4
    base_channels: int = 32
    depth: int = 3
    temporal_kernel: int = 3
    context_dim: int = 64
    time_embed_dim: int = 64
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_channels", "cond_channels", "base_channels", "depth",
                     "temporal_kernel", "context_dim", "time_embed_dim", "groups"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd")

    def level_channels(self) -> list[int]:
        return [self.base_channels * min(2**i, 2) for i in range(self.depth)]


@dataclass
class LoraConfig:
    rank: int = 32
    target_layers: Union[str, Sequence[str], Callable[[str, nn.Module], bool]] = "auto"
    scale: float = 1.0

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ValueError("LoRA rank must be >= 1")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1]; t has shape (B,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(groups, channels)
    return nn.GroupNorm(g, channels)


def reflect_indices(length: int, pad: int) -> torch.Tensor:
    """Indices for reflect padding that also work when ``pad >= length`` (incl. length 1)."""
    idx = torch.arange(-pad, length + pad)
    if length == 1:
        return torch.zeros_like(idx)
    period = 2 * (length - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= length, period - idx, idx)


class SpatialResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        # x: (N, C, h, w) frames, emb: (N, E)
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + (x if self.skip is None else self.skip(x))


class TemporalBlock(nn.Module):
    """Residual 1D convolution along time, applied at every spatial location."""

    def __init__(self, channels: int, kernel: int, groups: int):
        super().__init__()
        self.kernel = kernel
        self.norm = _norm(channels, groups)
        self.conv = nn.Conv1d(channels, channels, kernel)
        self.identity = False

    def forward(self, x, frames: int):
        if self.identity:
            return x
        n, c, h, w = x.shape
        b = n // frames
        seq = x.reshape(b, frames, c, h, w).permute(0, 3, 4, 2, 1).reshape(b * h * w, c, frames)
        y = F.silu(self.norm(seq))
        pad = self.kernel // 2
        if pad:
            y = y.index_select(-1, reflect_indices(frames, pad).to(y.device))
        y = self.conv(y)
        y = y.reshape(b, h, w, c, frames).permute(0, 4, 3, 1, 2).reshape(n, c, h, w)
        return x + y


class VideoDenoiser(nn.Module):
    """Velocity model v(phi_t, z_c, t, context) on latents shaped (B, T, h, w, c)."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        chans = cfg.level_channels()
        emb = 4 * cfg.base_channels
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.context_proj = nn.Linear(cfg.context_dim, emb)
            self.time_mlp = nn.Sequential(nn.Linear(cfg.time_embed_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
            self.in_conv = nn.Conv2d(cfg.latent_channels + cfg.cond_channels, chans[0], 3, padding=1)
            self.down_res = nn.ModuleList()
            self.down_temporal = nn.ModuleList()
            self.downsample = nn.ModuleList()
            prev = chans[0]
            for i, ch in enumerate(chans):
                self.down_res.append(SpatialResBlock(prev, ch, emb, cfg.groups))
                self.down_temporal.append(TemporalBlock(ch, cfg.temporal_kernel, cfg.groups))
                if i < len(chans) - 1:
                    self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                prev = ch
            self.mid_res = SpatialResBlock(prev, prev, emb, cfg.groups)
            self.mid_temporal = TemporalBlock(prev, cfg.temporal_kernel, cfg.groups)
            self.up_res = nn.ModuleList()
            self.up_temporal = nn.ModuleList()
            for ch in reversed(chans):
                self.up_res.append(SpatialResBlock(prev + ch, ch, emb, cfg.groups))
                self.up_temporal.append(TemporalBlock(ch, cfg.temporal_kernel, cfg.groups))
                prev = ch
            self.out_norm = _norm(chans[0], cfg.groups)
            self.out_conv = nn.Conv2d(chans[0], cfg.latent_channels, 3, padding=1)
        self.register_buffer("zero_context", torch.zeros(cfg.context_dim), persistent=False)

    def set_temporal_identity(self, flag: bool = True) -> None:
        """Diagnostic mode: every temporal block becomes the identity."""
        for m in self.modules():
            if isinstance(m, TemporalBlock):
                m.identity = flag

    def forward(self, phi_t, z_c, t, context=None):
        squeeze = phi_t.ndim == 4
        if squeeze:
            phi_t, z_c = phi_t[None], z_c[None]
        if phi_t.shape[:4] != z_c.shape[:4]:
            raise ValueError(
                f"phi_t {tuple(phi_t.shape)} and z_c {tuple(z_c.shape)} must share batch, frame and spatial axes")
        b, frames, h, w, _ = phi_t.shape
        t = torch.as_tensor(t, dtype=phi_t.dtype, device=phi_t.device).reshape(-1).expand(b)
        if context is None:
            context = self.zero_context.to(phi_t.dtype).expand(b, -1)
        emb = F.silu(self.context_proj(context) + self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim)))
        emb = emb.repeat_interleave(frames, dim=0)

        x = torch.cat([phi_t, z_c], dim=-1).reshape(b * frames, h, w, -1).permute(0, 3, 1, 2)
        x = self.in_conv(x)
        skips = []
        for i, (res, temporal) in enumerate(zip(self.down_res, self.down_temporal)):
            x = temporal(res(x, emb), frames)
            skips.append(x)
            if i < len(self.downsample):
                x = self.downsample[i](x)
        x = self.mid_temporal(self.mid_res(x, emb), frames)
        for res, temporal in zip(self.up_res, self.up_temporal):
            skip = skips.pop()
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = temporal(res(torch.cat([x, skip], dim=1), emb), frames)
        x = self.out_conv(F.silu(self.out_norm(x)))
        out = x.permute(0, 2, 3, 1).reshape(b, frames, h, w, -1)
        return out[0] if squeeze else out


# -- LoRA -------------------------------------------------------------------


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, scale: float):
        super().__init__()
        self.base = base
        self.scale = scale
        self.lora_down = nn.Conv2d(base.in_channels, rank, base.kernel_size, base.stride,
                                   base.padding, base.dilation, bias=False)
        self.lora_up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        self.lora_down.to(base.weight)
        self.lora_up.to(base.weight)
        nn.init.kaiming_uniform_(self.lora_down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_up.weight)

    def forward(self, x):
        return self.base(x) + self.scale * self.lora_up(self.lora_down(x))


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float):
        super().__init__()
        self.base = base
        self.scale = scale
        self.lora_down = nn.Linear(base.in_features, rank, bias=False)
        self.lora_up = nn.Linear(rank, base.out_features, bias=False)
        self.lora_down.to(base.weight)
        self.lora_up.to(base.weight)
        nn.init.kaiming_uniform_(self.lora_down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_up.weight)

    def forward(self, x):
        return self.base(x) + self.scale * self.lora_up(self.lora_down(x))


def _layer_dims(layer: nn.Module) -> tuple[int, int]:
    if isinstance(layer, nn.Conv2d):
        kh, kw = layer.kernel_size
        return layer.in_channels * kh * kw, layer.out_channels
    return layer.in_features, layer.out_features


def _inside_temporal(model: nn.Module, name: str) -> bool:
    parts = name.split(".")
    node = model
    for p in parts[:-1]:
        node = getattr(node, p)
        if isinstance(node, TemporalBlock):
            return True
    return False


def lora_candidates(model: nn.Module) -> list[str]:
    """Spatial convolution and projection layers, in module order."""
    names = []
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and not _inside_temporal(model, name + ".x"):
            if ".lora_" in name or name.endswith(".base"):
                continue
            names.append(name)
    return names


def _select_targets(model: nn.Module, cfg: LoraConfig) -> list[str]:
    candidates = lora_candidates(model)
    sel = cfg.target_layers
    if sel == "auto":
        return [n for n in candidates if min(_layer_dims(model.get_submodule(n))) >= cfg.rank]
    if callable(sel):
        return [n for n in candidates if sel(n, model.get_submodule(n))]
    if isinstance(sel, str):
        pattern = re.compile(sel)
        return [n for n in candidates if pattern.search(n)]
    missing = [n for n in sel if n not in candidates]
    if missing:
        raise KeyError(f"LoRA target layers not found among spatial layers: {missing}")
    return list(sel)


def inject_lora(model: nn.Module, cfg: LoraConfig | None = None) -> nn.Module:
    """Wrap the selected layers with zero-initialised low-rank adapters (in place)."""
    cfg = cfg or LoraConfig()
    targets = _select_targets(model, cfg)
    if not targets:
        raise ValueError("no layers selected for LoRA injection")
    for name in targets:
        layer = model.get_submodule(name)
        d_in, d_out = _layer_dims(layer)
        if cfg.rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {cfg.rank} exceeds min dimension {min(d_in, d_out)} of {name}")
    seed = getattr(getattr(model, "cfg", None), "seed", 0)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 1)
        for name in targets:
            parent_name, _, attr = name.rpartition(".")
            parent = model.get_submodule(parent_name) if parent_name else model
            layer = getattr(parent, attr)
            wrapper = LoRAConv2d if isinstance(layer, nn.Conv2d) else LoRALinear
            setattr(parent, attr, wrapper(layer, cfg.rank, cfg.scale))
    model.lora_config = cfg
    model.lora_targets = targets
    return model


def lora_param_count(model: nn.Module, rank: int, targets: Iterable[str]) -> int:
    total = 0
    for name in targets:
        layer = model.get_submodule(name)
        if isinstance(layer, (LoRAConv2d, LoRALinear)):
            layer = layer.base
        d_in, d_out = _layer_dims(layer)
        total += rank * (d_in + d_out)
    return total


# -- parameter partition and freezing ---------------------------------------


@dataclass
class ParamPartition:
    spatial: list = field(default_factory=list)
    temporal: list = field(default_factory=list)
    lora: list = field(default_factory=list)

    def subset(self, name: str) -> list[str]:
        if name in ("spatial", "temporal", "lora"):
            return list(getattr(self, name))
        if name == "all_base":
            return self.spatial + self.temporal
        if name == "all":
            return self.spatial + self.temporal + self.lora
        raise KeyError(f"unknown parameter subset {name!r}")


SUBSETS = ("spatial", "temporal", "lora", "all_base", "all")
_SPATIAL_TYPES = (nn.Conv2d, nn.Linear, nn.GroupNorm)


def partition_params(model: nn.Module) -> ParamPartition:
    """Classify every parameter by the role of the module that owns it."""
    part = ParamPartition()
    for name, _ in model.named_parameters():
        owner_name = name.rpartition(".")[0]
        owner = model.get_submodule(owner_name)
        path = owner_name.split(".") if owner_name else []
        node, role = model, None
        for i, p in enumerate(path):
            node = getattr(node, p)
            if isinstance(node, TemporalBlock):
                role = "temporal"
                break
            if isinstance(node, (LoRAConv2d, LoRALinear)) and i + 1 < len(path) and path[i + 1].startswith("lora_"):
                role = "lora"
                break
        if role is None:
            if isinstance(owner, _SPATIAL_TYPES):
                role = "spatial"
            else:
                raise TypeError(f"cannot classify parameter {name} (owner {type(owner).__name__})")
        getattr(part, role).append(name)
    return part


def _resolve(model: nn.Module, subset: Union[str, Iterable[str]]) -> list[str]:
    part = partition_params(model)
    if isinstance(subset, str):
        return part.subset(subset)
    names = []
    for s in subset:
        names += part.subset(s)
    return names


def freeze(model: nn.Module, subset: Union[str, Iterable[str]]) -> None:
    params = dict(model.named_parameters())
    for name in _resolve(model, subset):
        params[name].requires_grad_(False)


def unfreeze(model: nn.Module, subset: Union[str, Iterable[str]]) -> None:
    params = dict(model.named_parameters())
    for name in _resolve(model, subset):
        params[name].requires_grad_(True)


def freeze_mask(model: nn.Module) -> dict[str, bool]:
    return {name: not p.requires_grad for name, p in model.named_parameters()}


def apply_freeze_mask(model: nn.Module, mask: dict[str, bool]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(not mask.get(name, False))


def checksum(model: nn.Module, names: Optional[Iterable[str]] = None) -> str:
    """SHA-256 over the raw bytes of the named parameters (all when ``names`` is None)."""
    params = dict(model.named_parameters())
    names = sorted(params) if names is None else sorted(names)
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode())
        h.update(params[n].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def partition_checksums(model: nn.Module) -> dict[str, str]:
    part = partition_params(model)
    return {k: checksum(model, getattr(part, k)) for k in ("spatial", "temporal", "lora")}


def config_dict(model: VideoDenoiser) -> dict:
    out = {"denoiser": asdict(model.cfg)}
    lora = getattr(model, "lora_config", None)
    if lora is not None:
        out["lora"] = {"rank": lora.rank, "scale": lora.scale, "targets": list(model.lora_targets)}
    return out


def build_from_config(cfgdict: dict) -> VideoDenoiser:
    model = VideoDenoiser(DenoiserConfig(**cfgdict["denoiser"]))
    if "lora" in cfgdict:
        lc = cfgdict["lora"]
        inject_lora(model, LoraConfig(rank=lc["rank"], target_layers=list(lc["targets"]), scale=lc["scale"]))
    return model
