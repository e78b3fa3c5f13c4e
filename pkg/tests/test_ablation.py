import json

import pytest

from flowmatte.ablation import AblationPlan, Variant, run_ablation
from flowmatte.config import ConfigError


def test_plan_validation(tiny_cfg):
    for bad in ({}, {"variants": [{}]}, {"variants": [{"name": "a"}, {"name": "a"}]},
                {"variants": [{"name": "a", "skip_stages": ["stage9"]}]}):
        with pytest.raises(ConfigError):
            AblationPlan.from_dict(bad, tiny_cfg)
    plan = AblationPlan.from_dict({"variants": [{"name": "W/o Stage 1", "skip_stages": ["stage1"]}]}, tiny_cfg)
    assert plan.variants[0].slug == "w-o-stage-1" and Variant("!!").slug == "variant"


def test_single_variant_gives_single_row(tiny_cfg, tmp_path):
    plan = AblationPlan.from_dict({"variants": [{"name": "only"}]}, tiny_cfg)
    result = run_ablation(plan, tmp_path / "out")
    assert len(result.rows) == 1 and result.row("only")["status"] == "ok"
    assert {"mad", "dtssd"} <= set(result.row("only"))
    assert (tmp_path / "out" / "only" / "metrics.csv").exists()
    assert json.loads((tmp_path / "out" / "ablation.json").read_text())[0]["variant"] == "only"


def test_failed_variant_is_marked(tiny_cfg, tmp_path):
    plan = AblationPlan.from_dict({"variants": [
        {"name": "ok"},
        {"name": "bad", "overrides": {"stages": {"stage2": {"frozen": []}}}},
        {"name": "no-s1", "skip_stages": ["stage1"]},
    ]}, tiny_cfg)
    result = run_ablation(plan, tmp_path / "out")
    assert [r["status"] for r in result.rows] == ["ok", "failed", "ok"]
    assert "stage2" in result.row("bad")["error"]
    assert "bad [failed]" in result.table()
    with pytest.raises(KeyError):
        result.row("missing")
    # the shared base stages are reused from the plan cache rather than retrained
    assert any(p.name.startswith("stage1-") for p in (tmp_path / "out" / "cache").iterdir())
