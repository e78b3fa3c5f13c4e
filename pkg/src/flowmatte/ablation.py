"""Train several configuration variants under one budget and tabulate their test metrics."""

from __future__ import annotations

import json
import logging
import re
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .config import ConfigError, deep_merge, load_config, validate_config
from .metrics import TABLE_COLUMNS, format_table
from .training import STAGES

logger = logging.getLogger(__name__)


@dataclass
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)
    skip_stages: list = field(default_factory=list)

    @property
    def slug(self) -> str:
        return re.sub(r"[^a-z0-9]+", "-", self.name.lower()).strip("-") or "variant"


@dataclass
class AblationPlan:
    variants: list
    base: dict
    cache_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict, base: Optional[dict] = None) -> "AblationPlan":
        if not d.get("variants"):
            raise ConfigError("an ablation plan needs at least one variant")
        variants = []
        for v in d["variants"]:
            if "name" not in v:
                raise ConfigError("every variant needs a name")
            skip = list(v.get("skip_stages", []))
            if set(skip) - set(STAGES):
                raise ConfigError(f"{v['name']}: unknown stages in skip_stages {skip}")
            variants.append(Variant(v["name"], v.get("overrides", {}) or {}, skip))
        names = [v.name for v in variants]
        if len(set(names)) != len(names):
            raise ConfigError("variant names must be unique")
        cfg = base if base is not None else load_config()
        cfg = deep_merge(cfg, d.get("base", {}) or {})
        validate_config(cfg)
        return cls(variants, cfg, d.get("cache_dir"))

    @classmethod
    def load(cls, path, base: Optional[dict] = None) -> "AblationPlan":
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read plan {path}: {exc}") from exc
        return cls.from_dict(d, base)


@dataclass
class AblationResult:
    rows: list  # {"variant", "status", "seconds", metric...}
    columns: tuple = TABLE_COLUMNS

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["variant"] == name:
                return r
        raise KeyError(name)

    def table(self) -> str:
        body = []
        for r in self.rows:
            if r["status"] == "ok":
                body.append((r["variant"], r))
            else:
                body.append((f"{r['variant']} [failed]", {c: "failed" for c in self.columns}))
        return format_table(body, self.columns)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2)


def run_variant(variant: Variant, base: dict, out_dir: Path, cache_dir=None) -> dict:
    from . import pipeline

    cfg = deep_merge(base, variant.overrides)
    validate_config(cfg)
    stages = [s for s in STAGES if s not in variant.skip_stages]
    vdir = out_dir / variant.slug
    state = pipeline.train_stages(cfg, stages, cache_dir=cache_dir, out_dir=vdir)
    test_name = cfg["data"]["test_split"]
    test = pipeline.load_datasets(cfg, [test_name])[test_name]
    sampler, chunking = pipeline.sampler_from(cfg)
    preds = pipeline.predict_dataset(state.model, state.codec, test, sampler, chunking)
    report = pipeline.score(preds, test, cfg)
    report.write_csv(vdir / "metrics.csv")
    return report.aggregate


def run_ablation(plan: AblationPlan, out_dir) -> AblationResult:
    """Each variant is trained from the shared base config plus its overrides.

    A variant that raises is kept as a failed row; the others still run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = plan.cache_dir or out_dir / "cache"
    rows = []
    for v in plan.variants:
        t0 = time.time()
        try:
            metrics = run_variant(v, plan.base, out_dir, cache)
            rows.append({"variant": v.name, "status": "ok", "seconds": time.time() - t0, **metrics})
        except Exception as exc:  # a failed variant must not sink the whole table
            logger.error("variant %s failed: %s", v.name, exc)
            rows.append({"variant": v.name, "status": "failed", "seconds": time.time() - t0,
                         "error": "".join(traceback.format_exception_only(type(exc), exc)).strip()})
    result = AblationResult(rows)
    (out_dir / "ablation.json").write_text(result.to_json())
    (out_dir / "ablation.txt").write_text(result.table() + "\n")
    return result
