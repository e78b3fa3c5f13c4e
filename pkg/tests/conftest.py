import copy
import os
import sys
from pathlib import Path

import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent))

from flowmatte.config import default_config, deep_merge  # noqa: E402

TINY_NET = dict(base_channels=8, depth=2, groups=4, context_dim=8, time_embed_dim=8, seed=0)


def tiny_overrides(root: Path) -> dict:
    small_stage = dict(resolutions=[[16, 16]], iterations=2, length_range=[1, 3], batch_size=1)
    return {
        "workdir": str(root / "run"),
        "data": {"root": str(root / "data"), "frames": 3, "height": 16, "width": 16,
                 "datasets": {"bedlam": {"clips": 2}, "dynrep": {"clips": 2}, "vh60": {"clips": 2},
                              "vm": {"clips": 2}, "hair": {"clips": 2},
                              "test": {"clips": 2, "height": 16, "width": 16}}},
        "codec": {"hidden_channels": 8, "iterations": 10, "batch_size": 4, "crop_size": 16, "psnr_floor": 0.0},
        "denoiser": TINY_NET,
        "lora": {"rank": 4},
        "stages": {s: copy.deepcopy(small_stage) for s in ("stage1", "stage2", "stage3")},
        "inference": {"steps": 1, "chunk_length": 4, "overlap": 1},
    }


@pytest.fixture
def tiny_cfg(tmp_path):
    """A complete config that trains end to end in a few seconds."""
    return deep_merge(default_config(), tiny_overrides(tmp_path))


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_overrides(tmp_path)))
    return path


def cache_dir() -> Path:
    return Path(os.environ.get("FLOWMATTE_CACHE", Path(__file__).resolve().parent.parent / ".cache"))


# -- acceptance bookkeeping -------------------------------------------------------

RESULTS: list = []


def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_cfg():
    from flowmatte.config import load_config

    root = cache_dir()
    return load_config(overrides=[f"workdir={root / 'desk'}", f"data.root={root / 'data'}"])


@pytest.fixture(scope="session")
def desk(desk_cfg):
    """The default three-stage run, trained once and reused through the checkpoint cache."""
    from flowmatte import pipeline

    state = pipeline.train_stages(desk_cfg, cache_dir=cache_dir() / "ckpt")
    test_name = desk_cfg["data"]["test_split"]
    test = pipeline.load_datasets(desk_cfg, [test_name])[test_name]
    clips = [test.load(i) for i in range(len(test))]
    return {
        "cfg": desk_cfg,
        "model": state.model,
        "codec": state.codec,
        "rgb": [c[0].astype("float64") for c in clips],
        "alpha": [c[1].astype("float64") for c in clips],
    }
