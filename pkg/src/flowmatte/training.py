"""Three-stage training of the velocity model against a frozen codec."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .codec import CodecParams, encode
from .core import to_codec_range
from .denoiser import (LoraConfig, VideoDenoiser, apply_freeze_mask, build_from_config, checksum,
                       config_dict, freeze, freeze_mask, inject_lora, partition_params, unfreeze)
from .flow import FlowState, corrupt, sample_time
from .losses import (LossReport, LossWeights, decode_for_pixel_loss, latent_fm_loss, pixel_loss,
                     report_from, total_loss)
from .synth import MixtureConfig, MixtureEntry, MixtureSampler, crop_resize_batch, \
    sample_sequence_length

logger = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "stage3")
CHECKPOINT_VERSION = 1


class StageConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    name: str
    mixture: dict  # dataset name -> ratio
    resolutions: list
    learning_rate: float
    iterations: int
    frozen_sets: list = field(default_factory=list)
    lora: Optional[LoraConfig] = None
    losses: dict = field(default_factory=lambda: {"latent": True, "pixel": False})
    length_range: tuple = (1, 12)
    batch_size: int = 4
    pixel_loss_datasets: Optional[list] = None  # None: every matte-kind dataset
    pixel_budget: Optional[int] = None
    pixel_probability: float = 1.0  # < 1 applies pixel losses on a random subset of steps
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    log_every: int = 1

    def validate(self) -> None:
        if self.name not in STAGES:
            raise StageConfigError(f"unknown stage {self.name!r}")
        frozen = set(self.frozen_sets)
        unknown = frozen - {"spatial", "temporal", "all_base"}
        if unknown:
            raise StageConfigError(f"{self.name}: unknown frozen sets {sorted(unknown)}")
        if self.name == "stage1" and (frozen or self.losses.get("pixel")):
            raise StageConfigError("stage1 trains every parameter with the flow-matching loss only")
        if self.name == "stage2" and "temporal" not in frozen and "all_base" not in frozen:
            raise StageConfigError("stage2 must freeze the temporal layers")
        if self.name == "stage3":
            if "all_base" not in frozen or self.lora is None:
                raise StageConfigError("stage3 freezes the whole base model and trains LoRA adapters")
            if not self.losses.get("pixel"):
                raise StageConfigError("stage3 enables the pixel-space losses")
        if not self.losses.get("latent", True):
            raise StageConfigError("the latent flow-matching loss cannot be disabled")
        if not self.mixture:
            raise StageConfigError(f"{self.name}: empty mixture")
        if abs(sum(self.mixture.values()) - 1.0) > 1e-9 or min(self.mixture.values()) <= 0:
            raise StageConfigError(f"{self.name}: mixture ratios must be positive and sum to 1")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise StageConfigError(f"{self.name}: bad length_range {self.length_range}")
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise StageConfigError(f"{self.name}: iterations, batch_size and learning_rate must be valid")
        if not 0.0 < self.pixel_probability <= 1.0:
            raise StageConfigError(f"{self.name}: pixel_probability must be in (0, 1]")
        if not self.resolutions:
            raise StageConfigError(f"{self.name}: no resolutions")


@dataclass
class TrainState:
    model: VideoDenoiser
    codec: CodecParams
    torch_gen: torch.Generator
    np_rng: np.random.Generator
    stage: Optional[str] = None
    iteration: int = 0
    completed: list = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = None

    @classmethod
    def fresh(cls, model: VideoDenoiser, codec: CodecParams, seed: int = 0) -> "TrainState":
        return cls(model, codec, torch.Generator().manual_seed(seed), np.random.default_rng(seed))


# -- batching ----------------------------------------------------------------


class BatchSource:
    """Draws aligned (rgb, alpha, pixel flag) batches for one stage."""

    def __init__(self, cfg: StageConfig, datasets: dict, rng: np.random.Generator, spatial_factor: int = 4):
        entries = []
        for name, ratio in cfg.mixture.items():
            if name not in datasets:
                raise StageConfigError(f"{cfg.name}: unknown dataset {name!r}")
            ds = datasets[name]
            if cfg.pixel_loss_datasets is None:
                pix = ds.kind == "matte"
            else:
                pix = name in cfg.pixel_loss_datasets
            entries.append(MixtureEntry(ds, float(ratio), pix))
        self.cfg = cfg
        self.rng = rng
        self.sampler = MixtureSampler(MixtureConfig(entries), rng)
        self.spatial_factor = spatial_factor

    def next(self):
        cfg = self.cfg
        res = tuple(cfg.resolutions[int(self.rng.integers(len(cfg.resolutions)))])
        length = sample_sequence_length(self.rng, *cfg.length_range, resolution=res, pixel_budget=cfg.pixel_budget)
        rgbs, alphas, flags = [], [], []
        for _ in range(cfg.batch_size):
            k, i, pix = self.sampler.draw()
            rgb, alpha = self.sampler.datasets[k].load(i)
            rgb, alpha = crop_resize_batch([rgb, alpha], res, length, self.rng, spatial_factor=self.spatial_factor)
            rgbs.append(rgb)
            alphas.append(alpha)
            flags.append(pix)
        return (torch.from_numpy(np.stack(rgbs)), torch.from_numpy(np.stack(alphas)),
                torch.tensor(flags, dtype=torch.bool))


# -- one optimisation step ----------------------------------------------------


def _trainable(model):
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(model, cfg: StageConfig):
    params = _trainable(model)
    if not params:
        return None
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def train_step(batch, model: VideoDenoiser, codec: CodecParams, weights: LossWeights, stage: StageConfig,
               optimizer, gen: torch.Generator) -> LossReport:
    """One update of the unfrozen parameters; returns the loss breakdown."""
    rgb, alpha, pixel_flags = batch
    if any(p.requires_grad for p in codec.parameters()):
        raise RuntimeError("codec must be frozen during matting training")
    with torch.no_grad():
        z_c = encode(to_codec_range(rgb), codec).codes
        z_a = encode(to_codec_range(alpha), codec).codes
    b = z_a.shape[0]
    eps = torch.randn(z_a.shape, generator=gen, dtype=z_a.dtype)
    t = sample_time(gen, b).to(z_a.dtype)
    phi = corrupt(z_a, eps, t)
    model.train()
    v = model(phi, z_c, t)
    latent = latent_fm_loss(v, z_a, eps)
    use_pixel = bool(stage.losses.get("pixel")) and bool(pixel_flags.any())
    if use_pixel and stage.pixel_probability < 1.0:
        use_pixel = bool(torch.rand((), generator=gen) < stage.pixel_probability)
    comps = None
    loss = latent
    if use_pixel:
        m = pixel_flags
        pred = decode_for_pixel_loss(FlowState(t[m], phi[m]), v[m], codec)
        pix, comps = pixel_loss(pred, alpha[m].to(pred.dtype), weights)
        loss = total_loss(latent, pix, weights, pixel_enabled=True)
    report = report_from(latent.item(), {k: c.item() for k, c in comps.items()} if comps else None,
                         weights, use_pixel)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return report


# -- stages --------------------------------------------------------------------


def prepare_stage(state: TrainState, cfg: StageConfig) -> None:
    """Apply the stage's freeze pattern (and LoRA injection for stage 3)."""
    model = state.model
    if cfg.lora is not None and not hasattr(model, "lora_targets"):
        inject_lora(model, cfg.lora)
    unfreeze(model, "all")
    for subset in cfg.frozen_sets:
        freeze(model, subset)


def frozen_checksum(model) -> str:
    return checksum(model, [n for n, p in model.named_parameters() if not p.requires_grad])


class FreezeViolation(RuntimeError):
    pass


def run_stage(cfg: StageConfig, state: TrainState, datasets: dict, weights: LossWeights,
              out_dir=None, audit_every: int = 50, resume_optimizer: Optional[dict] = None,
              start_iteration: int = 0, time_limit: Optional[float] = None,
              checkpoint_every: int = 0) -> TrainState:
    """Run ``cfg.iterations`` steps, write ``<out_dir>/<stage>.pt`` and ``<stage>.jsonl``.

    With ``checkpoint_every`` a ``<stage>.resume.pt`` snapshot is refreshed
    periodically; :func:`resume_stage` continues from it.
    """
    cfg.validate()
    prepare_stage(state, cfg)
    model, codec = state.model, state.codec
    optimizer = make_optimizer(model, cfg)
    if resume_optimizer is not None and optimizer is not None:
        optimizer.load_state_dict(resume_optimizer)
    state.optimizer = optimizer
    state.stage = cfg.name
    source = BatchSource(cfg, datasets, state.np_rng, codec.spatial_factor)
    frozen_before = frozen_checksum(model)
    codec_before = codec.checksum()
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / f"{cfg.name}.jsonl", "a" if start_iteration else "w")
    t0 = time.time()
    try:
        for it in range(start_iteration, cfg.iterations):
            batch = source.next()
            report = train_step(batch, model, codec, weights, cfg, optimizer, state.torch_gen)
            state.iteration = it + 1
            if log_fh is not None and (it % cfg.log_every == 0 or it + 1 == cfg.iterations):
                log_fh.write(json.dumps({"stage": cfg.name, "iteration": it + 1, **report.as_dict()}) + "\n")
            if audit_every and (it + 1) % audit_every == 0 and frozen_checksum(model) != frozen_before:
                raise FreezeViolation(f"{cfg.name}: frozen parameters changed at step {it + 1}")
            if checkpoint_every and out_dir is not None and state.iteration % checkpoint_every == 0 \
                    and state.iteration < cfg.iterations:
                save_checkpoint(state, out_dir / f"{cfg.name}.resume.pt")
            if it % 100 == 0:
                logger.info("%s it=%d latent=%.4f total=%.4f", cfg.name, it, report.latent, report.total)
            if time_limit is not None and time.time() - t0 > time_limit:
                logger.warning("%s stopped at %d steps (time limit)", cfg.name, it + 1)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if frozen_checksum(model) != frozen_before:
        raise FreezeViolation(f"{cfg.name}: frozen parameters changed")
    if codec.checksum() != codec_before:
        raise FreezeViolation("codec parameters changed during matting training")
    state.completed.append(cfg.name)
    if out_dir is not None:
        # wall time of this call only; a resumed stage records its remainder
        save_checkpoint(state, out_dir / f"{cfg.name}.pt", extra={"seconds": time.time() - t0})
    return state


def resume_stage(cfg: StageConfig, path, codec: CodecParams, datasets: dict, weights: LossWeights,
                 out_dir=None, **kwargs) -> TrainState:
    """Continue a stage from a mid-stage checkpoint, restoring optimizer and RNG state."""
    state, blob = load_checkpoint(path, codec)
    if blob["stage"] != cfg.name:
        raise ValueError(f"checkpoint is from {blob['stage']}, not {cfg.name}")
    return run_stage(cfg, state, datasets, weights, out_dir, resume_optimizer=blob["optimizer"],
                     start_iteration=blob["iteration"], **kwargs)


# -- checkpoints ---------------------------------------------------------------


def _split_state(model):
    part = partition_params(model)
    sd = model.state_dict()
    lora = {k: v for k, v in sd.items() if k in set(part.lora)}
    base = {k: v for k, v in sd.items() if k not in lora}
    return base, lora


def save_checkpoint(state: TrainState, path, extra: Optional[dict] = None) -> None:
    base, lora = _split_state(state.model)
    blob = {
        "version": CHECKPOINT_VERSION,
        "config": config_dict(state.model),
        "base": base,
        "lora": lora,
        "freeze_mask": freeze_mask(state.model),
        "codec_checksum": state.codec.checksum(),
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "stage": state.stage,
        "iteration": state.iteration,
        "completed": list(state.completed),
        "rng": {"torch": state.torch_gen.get_state(), "numpy": state.np_rng.bit_generator.state},
        "extra": extra or {},
    }
    torch.save(blob, path)


def load_checkpoint(path, codec: CodecParams, check_codec: bool = True) -> tuple[TrainState, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    if check_codec and blob["codec_checksum"] != codec.checksum():
        raise ValueError("checkpoint was trained against a different codec")
    model = build_from_config(blob["config"])
    model.load_state_dict({**blob["base"], **blob["lora"]})
    apply_freeze_mask(model, blob["freeze_mask"])
    gen = torch.Generator()
    gen.set_state(blob["rng"]["torch"])
    rng = np.random.default_rng()
    rng.bit_generator.state = blob["rng"]["numpy"]
    state = TrainState(model, codec, gen, rng, blob["stage"], blob["iteration"], list(blob["completed"]))
    return state, blob


def stage_from_dict(name: str, d: dict, lora_defaults: Optional[dict] = None) -> StageConfig:
    """Build a :class:`StageConfig` from the nested config mapping."""
    lora = None
    if d.get("lora"):
        ld = dict(lora_defaults or {})
        if isinstance(d["lora"], dict):
            ld.update(d["lora"])
        lora = LoraConfig(rank=int(ld.get("rank", 32)), target_layers=ld.get("targets", "auto"),
                          scale=float(ld.get("scale", 1.0)))
    return StageConfig(
        name=name,
        mixture={k: float(v) for k, v in d["mixture"].items()},
        resolutions=[tuple(r) for r in d["resolutions"]],
        learning_rate=float(d["learning_rate"]),
        iterations=int(d["iterations"]),
        frozen_sets=list(d.get("frozen", [])),
        lora=lora,
        losses=dict(d.get("losses", {"latent": True, "pixel": False})),
        length_range=tuple(d.get("length_range", (1, 12))),
        batch_size=int(d.get("batch_size", 4)),
        pixel_loss_datasets=d.get("pixel_loss_datasets"),
        pixel_budget=d.get("pixel_budget"),
        pixel_probability=float(d.get("pixel_probability", 1.0)),
        betas=tuple(d.get("betas", (0.9, 0.999))),
        weight_decay=float(d.get("weight_decay", 0.01)),
        log_every=int(d.get("log_every", 1)),
    )
