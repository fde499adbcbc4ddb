"""scikit-learn style wrappers around the motion extractor and the full model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig
from .data import SequenceStore
from .evaluation import EvalProtocol, embed_all, nearest
from .losses import LossConfig
from .simo import SimoConfig, build_motion_sequence
from .training import ExperimentConfig, OptimizerConfig, SamplerConfig, train
from .validation import as_silhouettes, check_labels, check_sequences


class MotionSequenceExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer: sequences to per-clip aggregated motion frames.

    ``transform`` returns a ``[n, num_clips, H, W]`` array when every
    sequence yields the same clip count, else a list of arrays.
    """

    def __init__(self, clip_len=4, aggregation="mean", tail_policy="drop"):
        self.clip_len = clip_len
        self.aggregation = aggregation
        self.tail_policy = tail_policy

    def fit(self, X, y=None):
        cfg = self._config()
        check_sequences(X, min_frames=cfg.clip_len if cfg.tail_policy == "drop" else 1)
        self.n_features_in_ = 1
        return self

    def _config(self) -> SimoConfig:
        return SimoConfig(clip_len=self.clip_len, aggregation=self.aggregation, tail_policy=self.tail_policy)

    def transform(self, X):
        cfg = self._config()
        seqs = check_sequences(X, min_frames=cfg.clip_len if cfg.tail_policy == "drop" else 1)
        out = [build_motion_sequence(s, cfg).aggregated for s in seqs]
        if len({o.shape for o in out}) == 1:
            return np.stack(out)
        return out


class GaitRecognizer(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Trains the motion-aware gait model on labeled silhouette sequences.

    ``transform`` yields one embedding per sequence (concatenated parts);
    ``predict`` returns the label of the nearest training sequence.
    Sequences must already be normalized to 64x44.
    """

    def __init__(self, stage_channels=(4, 8, 8), femo_enabled=(False, True, True), use_simo=True,
                 motion_channels=4, clip_len=4, input_pool=4, num_parts=4, embedding_dim=16,
                 p=4, k=2, frames_per_sample=16, n_iter=500, lr=1e-3, lr_low=1e-4, decay_at=None,
                 margin=0.2, seed=0):
        self.stage_channels = stage_channels
        self.femo_enabled = femo_enabled
        self.use_simo = use_simo
        self.motion_channels = motion_channels
        self.clip_len = clip_len
        self.input_pool = input_pool
        self.num_parts = num_parts
        self.embedding_dim = embedding_dim
        self.p = p
        self.k = k
        self.frames_per_sample = frames_per_sample
        self.n_iter = n_iter
        self.lr = lr
        self.lr_low = lr_low
        self.decay_at = decay_at
        self.margin = margin
        self.seed = seed

    def _experiment(self, n_classes: int) -> ExperimentConfig:
        simo = SimoConfig(clip_len=self.clip_len, motion_channels=self.motion_channels) if self.use_simo else None
        backbone = BackboneConfig(stage_channels=list(self.stage_channels), femo_enabled=list(self.femo_enabled),
                                  simo=simo, input_pool=self.input_pool, num_parts=self.num_parts,
                                  embedding_dim=self.embedding_dim, num_classes=n_classes)
        decay = self.n_iter if self.decay_at is None else self.decay_at
        return ExperimentConfig(
            backbone=backbone,
            loss=LossConfig(margin=self.margin),
            sampler=SamplerConfig(p=self.p, k=self.k, frames_per_sample=self.frames_per_sample),
            optimizer=OptimizerConfig(lr=self.lr, lr_low=self.lr_low, decay_at=decay),
            eval=EvalProtocol(split="all"),
            total_iters=self.n_iter, checkpoint_every=0, seed=self.seed)

    def fit(self, X, y):
        seqs = check_sequences(X)
        y = check_labels(y, len(seqs))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        cfg = self._experiment(self.classes_.size)
        store = SequenceStore(as_silhouettes(seqs, labels=[f"{c:06d}" for c in codes]))
        state = train(cfg, store)
        self.model_ = state.model
        self.config_ = cfg
        self.history_ = state.history
        self.n_features_in_ = 1
        self.train_embeddings_ = self._embed(seqs)
        self.train_labels_ = y
        return self

    def _embed(self, seqs) -> np.ndarray:
        table = embed_all(self.model_, as_silhouettes(seqs), self.config_.eval)
        return table.embeddings

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._embed(check_sequences(X))

    def predict(self, X) -> np.ndarray:
        emb = self.transform(X)
        return np.array([self.train_labels_[nearest(self.train_embeddings_, e)] for e in emb])
