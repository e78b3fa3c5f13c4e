"""Command-line entry point: ``flowmatte <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, metric_scales, write_snapshot

logger = logging.getLogger("flowmatte")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _config(args) -> dict:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def cmd_generate_data(args) -> int:
    from .pipeline import generate_data

    cfg = _config(args)
    manifests = generate_data(cfg, force=args.force)
    write_snapshot(cfg, cfg["data"]["root"])
    for name, m in manifests.items():
        print(f"{name:10s} {m.kind:12s} {len(m.clips):4d} clips  {m.root}")
    return EXIT_OK


def cmd_train_codec(args) -> int:
    from .codec import format_codec_report
    from .pipeline import ensure_codec, load_datasets, workdir, write_codec_report

    cfg = _config(args)
    write_snapshot(cfg, workdir(cfg))
    datasets = load_datasets(cfg)
    codec = ensure_codec(cfg, datasets, cache_dir=args.cache)
    rows = write_codec_report(cfg, codec, datasets)
    print(format_codec_report(rows))
    held = rows and min(r["psnr"] for r in rows)
    floor = cfg["codec"]["psnr_floor"]
    if args.strict and held < floor:
        print(f"codec PSNR {held:.2f} dB below floor {floor:.2f} dB", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import loss_weights, stage_config
    from .pipeline import ensure_codec, load_datasets, setup_runtime, training_names, workdir
    from .training import STAGES, TrainState, load_checkpoint, resume_stage, run_stage

    cfg = _config(args)
    setup_runtime(cfg)
    out = workdir(cfg)
    write_snapshot(cfg, out)
    stages = list(STAGES) if args.stage == "all" else [f"stage{args.stage}"]
    codec = ensure_codec(cfg, cache_dir=args.cache)
    datasets = load_datasets(cfg, training_names(cfg))
    weights = loss_weights(cfg)
    state = None
    for name in stages:
        scfg = stage_config(cfg, name)
        resume = out / f"{name}.resume.pt"
        if args.resume and resume.exists():
            logger.info("resuming %s from %s", name, resume)
            state = resume_stage(scfg, resume, codec, datasets, weights, out, checkpoint_every=args.checkpoint_every)
            continue
        if state is None:
            prev = STAGES.index(name) - 1
            if prev >= 0 and (out / f"{STAGES[prev]}.pt").exists():
                state, _ = load_checkpoint(out / f"{STAGES[prev]}.pt", codec)
            elif prev >= 0 and not args.from_scratch:
                raise ConfigError(f"{name} needs {STAGES[prev]}.pt in {out} (or --from-scratch)")
            else:
                from .config import denoiser_config
                from .denoiser import VideoDenoiser

                state = TrainState.fresh(VideoDenoiser(denoiser_config(cfg)), codec, int(cfg["seed"]))
        state = run_stage(scfg, state, datasets, weights, out, checkpoint_every=args.checkpoint_every)
        print(f"{name}: {scfg.iterations} iterations -> {out / (name + '.pt')}")
    return EXIT_OK


def _read_input(path: Path):
    from .core import read_frames

    if (path / "rgb").is_dir():
        path = path / "rgb"
    frames = read_frames(path)
    if frames.ndim != 4:
        raise ConfigError(f"{path} does not hold colour frames")
    return frames


def cmd_infer(args) -> int:
    from .core import write_frames
    from .pipeline import load_trained, sampler_from, setup_runtime
    from .synth import ClipDataset
    from .inference import infer

    cfg = _config(args)
    setup_runtime(cfg)
    if args.chunk_length is not None:
        cfg["inference"]["chunk_length"] = args.chunk_length
    if args.overlap is not None:
        cfg["inference"]["overlap"] = args.overlap
    sampler, chunking = sampler_from(cfg, args.steps, args.seed)
    model, codec = load_trained(cfg, args.checkpoint)
    src, dst = Path(args.input), Path(args.output)
    write_snapshot(cfg, dst)
    if (src / "manifest.json").exists():
        ds = ClipDataset(src)
        for i, clip in enumerate(ds.manifest.clips):
            rgb, _ = ds.load(i)
            alpha = infer(rgb.astype(np.float64), model, codec, sampler, chunking)
            write_frames(dst / clip["path"] / "alpha", alpha.alphas)
        print(f"wrote {len(ds)} clips to {dst}")
    else:
        alpha = infer(_read_input(src), model, codec, sampler, chunking)
        write_frames(dst, alpha.alphas)
        print(f"wrote {len(alpha)} frames to {dst}")
    return EXIT_OK


def _parse_scales(items):
    out = {}
    for item in items or ():
        key, _, value = item.partition("=")
        if not value:
            raise ConfigError(f"--scales expects name=value, got {item!r}")
        key = key if key.endswith("_scale") else f"{key}_scale"
        out[key] = float(value)
    return out


def cmd_eval(args) -> int:
    from .metrics import MetricScales, evaluate

    cfg = _config(args)
    base = metric_scales(cfg)
    try:
        scales = MetricScales(**{**base.__dict__, **_parse_scales(args.scales)})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    report = evaluate(args.gt, args.pred, scales)
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    if args.csv:
        report.write_csv(args.csv)
    if report.partial:
        print(f"warning: {len(report.missing)} clip(s) missing; mean is partial", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import AblationPlan, run_ablation

    cfg = _config(args)
    plan = AblationPlan.load(args.plan, cfg)
    out = Path(args.output or Path(cfg["workdir"]) / "ablation")
    write_snapshot(plan.base, out)
    result = run_ablation(plan, out)
    print(result.table())
    return EXIT_OK if all(r["status"] == "ok" for r in result.rows) else EXIT_RUNTIME


def cmd_defocus(args) -> int:
    from .core import read_frames, write_frames
    from .defocus import defocus

    frames = _read_input(Path(args.input))
    alpha = read_frames(args.alpha)
    depth = read_frames(args.depth) if args.depth else 1.0
    if isinstance(depth, np.ndarray) and depth.ndim == 4:
        depth = depth.mean(-1)
    out = defocus(frames, alpha, depth, args.strength)
    write_frames(args.output, out.frames)
    print(f"wrote {len(out)} frames to {args.output}")
    return EXIT_OK


def cmd_timing(args) -> int:
    from .inference import timing_report
    from .pipeline import load_trained, setup_runtime

    cfg = _config(args)
    setup_runtime(cfg)
    model, codec = load_trained(cfg, args.checkpoint)
    steps = [int(s) for s in args.steps.split(",")]
    rows = timing_report(_read_input(Path(args.input)), model, codec, steps, repeats=args.repeats)
    print(f"{'steps':>5} | {'seconds':>8} | frames")
    for r in rows:
        print(f"{r['steps']:>5} | {r['seconds']:8.3f} | {r['frames']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowmatte", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, positional=True):
        if positional:
            sp.add_argument("config", nargs="?", default=None, help="YAML config (defaults when omitted)")
        else:
            sp.add_argument("--config", default=None)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        return sp

    sp = with_config(sub.add_parser("generate-data", help="render the procedural datasets"))
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_generate_data)

    sp = with_config(sub.add_parser("train-codec", help="train and freeze the frame autoencoder"))
    sp.add_argument("--cache", default=None)
    sp.add_argument("--strict", action="store_true", help="fail when the PSNR floor is not met")
    sp.set_defaults(func=cmd_train_codec)

    sp = with_config(sub.add_parser("train", help="run one or all training stages"))
    sp.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    sp.add_argument("--cache", default=None)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--from-scratch", action="store_true", help="allow stage 2/3 without a previous stage")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("infer", help="predict mattes for a clip or a dataset"), positional=False)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--chunk-length", type=int, default=None)
    sp.add_argument("--overlap", type=int, default=None)
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("eval", help="score predicted mattes against a manifest"), positional=False)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True, help="dataset manifest (or its directory)")
    sp.add_argument("--scales", nargs="*", metavar="NAME=VALUE")
    sp.add_argument("--json", default=None)
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="train and compare plan variants"), positional=False)
    sp.add_argument("plan")
    sp.add_argument("--output", default=None)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("defocus", help="blur the background behind a matte")
    sp.add_argument("--input", required=True)
    sp.add_argument("--alpha", required=True)
    sp.add_argument("--depth", default=None)
    sp.add_argument("--strength", type=float, required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_defocus)

    sp = with_config(sub.add_parser("timing", help="wall time per clip against step count"), positional=False)
    sp.add_argument("--input", required=True)
    sp.add_argument("--steps", default="1,2,3,5,10,25")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--checkpoint", default=None)
    sp.set_defaults(func=cmd_timing)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
