"""scikit-learn style wrapper around the codec, staged training and inference."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .core import RangeError, ShapeMismatchError


def check_video(X, name: str = "X") -> list:
    """Coerce one clip (T,H,W,3) or a sequence of clips to a list of float64 arrays in [0, 1]."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
    clips = []
    for i, clip in enumerate(X):
        a = np.asarray(clip, dtype=np.float64)
        if a.ndim != 4 or a.shape[-1] != 3:
            raise ValueError(f"{name}[{i}]: expected T x H x W x 3, got {a.shape}")
        if a.shape[0] == 0:
            raise ValueError(f"{name}[{i}]: empty clip")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}[{i}]: non-finite values")
        if a.min() < 0 or a.max() > 1:
            raise RangeError(f"{name}[{i}]: values must lie in [0, 1]")
        clips.append(a)
    if not clips:
        raise ValueError(f"{name}: no clips")
    return clips


def check_alpha(y, clips: Sequence[np.ndarray], name: str = "y") -> list:
    """Coerce mattes to float64 T x H x W arrays aligned with ``clips``."""
    if isinstance(y, np.ndarray) and y.ndim == 3:
        y = [y]
    mattes = [np.asarray(a, dtype=np.float64) for a in y]
    if len(mattes) != len(clips):
        raise ValueError(f"{name}: {len(mattes)} mattes for {len(clips)} clips")
    for i, (a, c) in enumerate(zip(mattes, clips)):
        if a.shape != c.shape[:3]:
            axis = next(n for n, u, v in zip("THW", a.shape, c.shape) if u != v) if a.ndim == 3 else "ndim"
            raise ShapeMismatchError(axis, a.shape, c.shape[:3], f"{name}[{i}]")
        if a.min() < 0 or a.max() > 1:
            raise RangeError(f"{name}[{i}]: values must lie in [0, 1]")
    return mattes


class VideoMatter(BaseEstimator, TransformerMixin):
    """Trimap-free video matting.

    ``fit(X, y)`` trains the autoencoder and the three stages on the given
    clips; ``predict``/``transform`` return one T x H x W matte per clip.
    """

    def __init__(self, config=None, steps: int = 3, seed: int = 0, chunk_length: int = 12, overlap: int = 2,
                 iterations: Optional[dict] = None, codec_iterations: Optional[int] = None):
        self.config = config
        self.steps = steps
        self.seed = seed
        self.chunk_length = chunk_length
        self.overlap = overlap
        self.iterations = iterations
        self.codec_iterations = codec_iterations

    def _resolved_config(self) -> dict:
        from .config import deep_merge, load_config

        if isinstance(self.config, dict):
            cfg = deep_merge(load_config(), self.config)
        else:
            cfg = load_config(self.config)
        cfg = copy.deepcopy(cfg)
        cfg["seed"] = self.seed
        for stage, n in (self.iterations or {}).items():
            cfg["stages"][stage]["iterations"] = int(n)
        if self.codec_iterations is not None:
            cfg["codec"]["iterations"] = int(self.codec_iterations)
        return cfg

    def fit(self, X, y):
        from .codec import train_codec
        from .config import codec_config, denoiser_config, loss_weights, stage_config
        from .denoiser import VideoDenoiser
        from .pipeline import setup_runtime
        from .synth import ClipDataset
        from .training import STAGES, TrainState, run_stage

        clips = check_video(X)
        mattes = check_alpha(y, clips)
        cfg = self._resolved_config()
        setup_runtime(cfg)
        data = ClipDataset.from_arrays(clips, mattes, name="user")
        self.codec_ = train_codec([data], codec_config(cfg)).params
        state = TrainState.fresh(VideoDenoiser(denoiser_config(cfg)), self.codec_, self.seed)
        for name in STAGES:
            cfg["stages"][name]["mixture"] = {"user": 1.0}
            cfg["stages"][name].pop("pixel_loss_datasets", None)
            state = run_stage(stage_config(cfg, name), state, {"user": data}, loss_weights(cfg))
        self.model_ = state.model
        self.config_ = cfg
        return self

    @classmethod
    def from_checkpoint(cls, workdir, checkpoint=None, **params) -> "VideoMatter":
        """Wrap a model trained through the CLI (``workdir`` holds codec.pt and stage checkpoints)."""
        from .config import load_config
        from .pipeline import load_trained

        est = cls(**params)
        cfg = load_config(Path(workdir) / "resolved_config.yaml") if (Path(workdir) / "resolved_config.yaml").exists() \
            else load_config()
        cfg["workdir"] = str(workdir)
        est.model_, est.codec_ = load_trained(cfg, checkpoint)
        est.config_ = cfg
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("VideoMatter is not fitted yet; call fit or from_checkpoint")

    def predict(self, X):
        from .flow import SamplerConfig
        from .inference import Chunking, infer

        self._check_fitted()
        single = isinstance(X, np.ndarray) and X.ndim == 4
        clips = check_video(X)
        sampler = SamplerConfig(steps=self.steps, seed=self.seed)
        chunking = Chunking(self.chunk_length, self.overlap)
        out = [infer(c, self.model_, self.codec_, sampler, chunking).alphas for c in clips]
        return out[0] if single else out

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y) -> float:
        """Negative mean absolute matte error (higher is better)."""
        clips = check_video(X)
        mattes = check_alpha(y, clips)
        preds = self.predict(clips)
        return -float(np.mean([np.mean(np.abs(p - g)) for p, g in zip(preds, mattes)]))
