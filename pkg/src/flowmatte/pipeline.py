"""End-to-end orchestration driven by a resolved config mapping."""

from __future__ import annotations

import logging
import shutil
import time
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .codec import CodecParams, codec_report, load_codec, save_codec, train_codec, write_codec_report_csv
from .config import (codec_config, denoiser_config, fingerprint, loss_weights, metric_scales, stage_config,
                     write_snapshot)
from .core import write_clip
from .denoiser import VideoDenoiser
from .flow import SamplerConfig
from .inference import Chunking, infer
from .metrics import MetricReport, clip_metrics
from .synth import ClipDataset, DatasetManifest, generate_preset
from .training import STAGES, TrainState, load_checkpoint, run_stage

logger = logging.getLogger(__name__)


def setup_runtime(cfg: dict) -> None:
    """Single-threaded deterministic kernels, so reruns are byte-identical."""
    if cfg.get("threads"):
        torch.set_num_threads(int(cfg["threads"]))
    if cfg.get("deterministic", True):
        torch.use_deterministic_algorithms(True)


def data_root(cfg: dict) -> Path:
    return Path(cfg["data"]["root"])


def workdir(cfg: dict) -> Path:
    return Path(cfg["workdir"])


def _dataset_spec(cfg: dict, name: str) -> dict:
    d = cfg["data"]
    spec = {"frames": d["frames"], "height": d["height"], "width": d["width"], "label_noise": 0.0}
    spec.update(d["datasets"][name])
    return spec


def generate_data(cfg: dict, names: Optional[Iterable[str]] = None, force: bool = False) -> dict:
    """Render every configured dataset that is not already on disk (or all with ``force``)."""
    root = data_root(cfg)
    out = {}
    for name in names or cfg["data"]["datasets"]:
        spec = _dataset_spec(cfg, name)
        manifest_path = root / name / "manifest.json"
        stamp = fingerprint(spec)
        if manifest_path.exists() and not force:
            if _stamp(root / name) == stamp:
                out[name] = DatasetManifest.load(manifest_path)
                continue
        if (root / name).exists():
            shutil.rmtree(root / name)
        logger.info("rendering %s (%d clips)", name, spec["clips"])
        out[name] = generate_preset(root, name, spec["preset"], spec["kind"], int(spec["clips"]), int(spec["seed"]),
                                    T=int(spec["frames"]), H=int(spec["height"]), W=int(spec["width"]),
                                    label_noise=float(spec["label_noise"]))
        (root / name / "spec.sha").write_text(stamp)
    return out


def _stamp(directory: Path) -> Optional[str]:
    p = directory / "spec.sha"
    return p.read_text().strip() if p.exists() else None


def load_datasets(cfg: dict, names: Optional[Iterable[str]] = None) -> dict:
    manifests = generate_data(cfg, names)
    return {name: ClipDataset(m) for name, m in manifests.items()}


def training_names(cfg: dict) -> list:
    return [n for n in cfg["data"]["datasets"] if n != cfg["data"]["test_split"]]


def codec_key(cfg: dict) -> str:
    return fingerprint({"codec": cfg["codec"], "data": {n: _dataset_spec(cfg, n) for n in training_names(cfg)}})


def ensure_codec(cfg: dict, datasets: Optional[dict] = None, cache_dir=None) -> CodecParams:
    """Train (or reuse) the frozen autoencoder on every non-test dataset."""
    key = codec_key(cfg)
    out = workdir(cfg) / "codec.pt"
    cached = Path(cache_dir) / f"codec-{key}.pt" if cache_dir else None
    for candidate in (cached, out):
        if candidate is not None and candidate.exists():
            blob = torch.load(candidate, map_location="cpu", weights_only=True)
            if blob.get("key") == key:
                codec = load_codec(candidate)
                if candidate != out:
                    out.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(candidate, out)
                return codec
    datasets = datasets or load_datasets(cfg, training_names(cfg))
    t0 = time.time()
    result = train_codec([datasets[n] for n in training_names(cfg)], codec_config(cfg))
    seconds = time.time() - t0
    logger.info("codec held-out PSNR %.2f dB (floor %.2f)", result.holdout_psnr, result.floor)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(result.params, out, extra={"key": key, "holdout_psnr": result.holdout_psnr,
                                                 "seconds": seconds})
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(out, cached)
    return result.params


def write_codec_report(cfg: dict, codec: CodecParams, datasets: dict) -> list:
    rows = codec_report(datasets, codec)
    workdir(cfg).mkdir(parents=True, exist_ok=True)
    write_codec_report_csv(rows, workdir(cfg) / "codec_report.csv")
    return rows


def stage_key(cfg: dict, stages: list, upto: str) -> str:
    """Fingerprint of everything that determines the checkpoint after stage ``upto``."""
    idx = stages.index(upto)
    return fingerprint({
        "seed": cfg["seed"],
        "codec": codec_key(cfg),
        "data": {n: _dataset_spec(cfg, n) for n in training_names(cfg)},
        "denoiser": cfg["denoiser"],
        "lora": cfg["lora"],
        "loss": cfg["loss"],
        "optimizer": cfg["optimizer"],
        "stages": [(s, cfg["stages"][s]) for s in stages[:idx + 1]],
    })


def train_stages(cfg: dict, stages: Iterable[str] = STAGES, codec: Optional[CodecParams] = None,
                 datasets: Optional[dict] = None, cache_dir=None, out_dir=None) -> TrainState:
    """Run the requested stages in order; ``stage1`` missing means starting stage 2 from scratch.

    Stage checkpoints are reused from ``cache_dir`` when an identical run has
    already produced them.
    """
    stages = [s for s in STAGES if s in set(stages)]
    setup_runtime(cfg)
    out_dir = Path(out_dir) if out_dir else workdir(cfg)
    write_snapshot(cfg, out_dir)
    codec = codec or ensure_codec(cfg, cache_dir=cache_dir)
    datasets = datasets or load_datasets(cfg, training_names(cfg))
    weights = loss_weights(cfg)
    state = None
    for name in stages:
        key = stage_key(cfg, stages, name)
        cached = Path(cache_dir) / f"{name}-{key}.pt" if cache_dir else None
        target = out_dir / f"{name}.pt"
        if cached is not None and cached.exists():
            logger.info("%s: reusing cached checkpoint %s", name, cached.name)
            state, _ = load_checkpoint(cached, codec)
            shutil.copyfile(cached, target)
            continue
        if state is None:
            model = VideoDenoiser(denoiser_config(cfg))
            state = TrainState.fresh(model, codec, int(cfg["seed"]))
        state = run_stage(stage_config(cfg, name), state, datasets, weights, out_dir=out_dir)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(target, cached)
    if state is None:
        raise ValueError("no stages selected")
    return state


def load_trained(cfg: dict, checkpoint=None, codec: Optional[CodecParams] = None):
    codec = codec or load_codec(workdir(cfg) / "codec.pt")
    path = Path(checkpoint) if checkpoint else latest_checkpoint(workdir(cfg))
    state, _ = load_checkpoint(path, codec)
    return state.model, codec


def latest_checkpoint(directory) -> Path:
    for name in reversed(STAGES):
        p = Path(directory) / f"{name}.pt"
        if p.exists():
            return p
    raise FileNotFoundError(f"no stage checkpoint in {directory}")


def sampler_from(cfg: dict, steps: Optional[int] = None, seed: Optional[int] = None):
    inf = cfg["inference"]
    sampler = SamplerConfig(steps=int(steps if steps is not None else inf["steps"]),
                            seed=int(seed if seed is not None else inf["seed"]))
    return sampler, Chunking(int(inf["chunk_length"]), int(inf["overlap"]))


def predict_dataset(model, codec, dataset: ClipDataset, sampler: SamplerConfig, chunking: Chunking) -> list:
    preds = []
    for i in range(len(dataset)):
        rgb, _ = dataset.load(i)
        preds.append(infer(rgb.astype(np.float64), model, codec, sampler, chunking).alphas)
    return preds


def score(preds: list, dataset: ClipDataset, cfg: dict) -> MetricReport:
    report = MetricReport(metric_scales(cfg))
    for i, pred in enumerate(preds):
        _, gt = dataset.load(i)
        report.rows.append({"clip": dataset.manifest.clips[i]["path"],
                            **clip_metrics(pred, gt.astype(np.float64), report.scales)})
    return report


def write_predictions(preds: list, dataset: ClipDataset, out_dir) -> None:
    for pred, clip in zip(preds, dataset.manifest.clips):
        write_clip(Path(out_dir) / clip["path"], alpha=pred)
