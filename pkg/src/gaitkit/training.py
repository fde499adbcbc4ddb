"""Deterministic (p, k) training with Adam, step decay, checkpoints and a metrics log."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .backbone import BackboneConfig, GaitModel
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetIndex, SequenceStore
from .data.synth import load_synth_config
from .errors import CheckpointMismatchError, ConfigError, TrainingAborted
from .evaluation import EvalProtocol
from .losses import LossConfig, combined

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
TIMING_NAME = "timing.jsonl"
FINAL_NAME = "last.gckp"

# keys that may differ between a checkpoint and the config resuming it
RESUME_FREE_KEYS = ("total_iters", "checkpoint_every", "data_root", "eval", "synth")


def _checked(cls, doc, section: str):
    if doc is None:
        return cls()
    if isinstance(doc, cls):
        return doc
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class SamplerConfig:
    p: int = 8
    k: int = 8
    frames_per_sample: int = 30

    def __post_init__(self):
        if self.p < 2:
            raise ConfigError("sampler.p must be >= 2 (triplets need two classes)")
        if self.k < 2:
            raise ConfigError("sampler.k must be >= 2 (triplets need positives)")
        if self.frames_per_sample < 1:
            raise ConfigError("sampler.frames_per_sample must be >= 1")


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    lr_low: float = 1e-5
    decay_at: int = 70000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.lr_low <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.decay_at < 0:
            raise ConfigError("optimizer.decay_at must be >= 0")

    def lr_at(self, iteration: int) -> float:
        return self.lr if iteration < self.decay_at else self.lr_low


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    total_iters: int = 80000
    checkpoint_every: int = 1000
    seed: int = 0
    data_root: str | None = None
    synth: dict | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_iters < self.optimizer.decay_at:
            raise ConfigError(f"total_iters={self.total_iters} is below optimizer.decay_at={self.optimizer.decay_at}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.sampler.frames_per_sample < self.backbone.min_frames():
            raise ConfigError(f"frames_per_sample must be >= {self.backbone.min_frames()} for this backbone")
        if self.synth is not None:
            load_synth_config(self.synth)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "loss": self.loss.to_dict(),
            "sampler": asdict(self.sampler),
            "optimizer": asdict(self.optimizer),
            "eval": self.eval.to_dict(),
            "total_iters": self.total_iters,
            "checkpoint_every": self.checkpoint_every,
            "seed": self.seed,
            "data_root": self.data_root,
            "synth": self.synth,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("experiment config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        bb = doc.get("backbone")
        doc["backbone"] = bb if isinstance(bb, BackboneConfig) else BackboneConfig.from_dict(bb or {})
        doc["loss"] = _checked(LossConfig, doc.get("loss"), "loss")
        doc["sampler"] = _checked(SamplerConfig, doc.get("sampler"), "sampler")
        doc["optimizer"] = _checked(OptimizerConfig, doc.get("optimizer"), "optimizer")
        ev = doc.get("eval")
        doc["eval"] = ev if isinstance(ev, EvalProtocol) else EvalProtocol.from_dict(ev or {})
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no config file at {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return ExperimentConfig.from_dict(doc or {})


# ---------------------------------------------------------------- sampling

@dataclass
class Batch:
    x: np.ndarray          # [p*k, 1, frames, H, W]
    labels: np.ndarray     # [p*k] class ids within the store
    indices: np.ndarray    # [p*k] sequence rows of the store
    starts: np.ndarray     # [p*k] crop start frames


def crop_indices(length: int, frames: int, start: int) -> np.ndarray:
    """Frame indices of a ``frames``-long window; short sequences repeat cyclically."""
    if length >= frames:
        return np.arange(start, start + frames)
    return np.arange(frames) % length


def sample_batch(store: SequenceStore, p: int, k: int, frames: int, rng: np.random.Generator) -> Batch:
    """``p`` distinct subjects with ``k`` sequences each, randomly cropped.

    Subjects with fewer than ``k`` sequences are drawn with replacement.
    """
    classes = len(store.by_label)
    if p > classes:
        raise ConfigError(f"sampler.p={p} exceeds the {classes} subjects available")
    chosen = rng.choice(classes, size=p, replace=False)
    rows, labels, starts = [], [], []
    for c in chosen:
        pool = store.by_label[c]
        picks = rng.choice(pool, size=k, replace=pool.size < k)
        for r in picks:
            length = store.frames[r].shape[0]
            start = int(rng.integers(0, length - frames + 1)) if length >= frames else 0
            rows.append(int(r))
            labels.append(int(c))
            starts.append(start)
    x = np.stack([store.frames[r][crop_indices(store.frames[r].shape[0], frames, s)]
                  for r, s in zip(rows, starts)])[:, None]
    return Batch(x=x, labels=np.array(labels), indices=np.array(rows), starts=np.array(starts))


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    config: ExperimentConfig
    model: GaitModel
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": p.data for n, p in self.model.named_parameters()}
        out.update({f"buffer/{n}": b for n, b in self.model.named_buffers()})
        out.update({f"adam_m/{n}": a for n, a in self.optimizer.m.items()})
        out.update({f"adam_v/{n}": a for n, a in self.optimizer.v.items()})
        return out

    def manifest(self) -> dict:
        return {
            "kind": "gaitkit-train-state",
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "iteration": self.iteration,
            "adam_t": self.optimizer.t,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
            "num_parameters": self.model.num_parameters(),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.manifest(), self.tensors())


def new_state(cfg: ExperimentConfig) -> TrainState:
    model = GaitModel(cfg.backbone, seed=cfg.seed)
    opt = Adam(model.named_parameters(), cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps)
    rng = np.random.default_rng([cfg.seed, 5])
    return TrainState(config=cfg, model=model, optimizer=opt, rng=rng)


def _trajectory_view(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k not in RESUME_FREE_KEYS}


def restore_state(path, cfg: ExperimentConfig | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint.

    With ``cfg`` given, every setting that shapes the trajectory must match
    the checkpoint's own configuration (run length, checkpoint cadence, data
    location and evaluation settings may differ).
    """
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "gaitkit-train-state":
        raise CheckpointMismatchError(f"{path} is not a training checkpoint")
    saved = ExperimentConfig.from_dict(manifest["config"])
    if cfg is None:
        cfg = saved
    else:
        a, b = _trajectory_view(saved.to_dict()), _trajectory_view(cfg.to_dict())
        if a != b:
            diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
            raise CheckpointMismatchError(f"checkpoint {path} was produced by a different config (differs in: {diff})")
    state = new_state(cfg)
    model_state = {}
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind in ("param", "buffer"):
            model_state[key] = arr
    try:
        state.model.load_state_dict(model_state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatchError(f"{path}: {exc}") from None
    for name in state.optimizer.m:
        state.optimizer.m[name] = tensors[f"adam_m/{name}"].copy()
        state.optimizer.v[name] = tensors[f"adam_v/{name}"].copy()
    state.optimizer.t = int(manifest["adam_t"])
    state.rng.bit_generator.state = manifest["rng"]
    state.iteration = int(manifest["iteration"])
    state.history = list(manifest["history"])
    return state


def load_model(path) -> tuple[GaitModel, ExperimentConfig, dict]:
    """Model weights and config from any training checkpoint."""
    state = restore_state(path)
    return state.model, state.config, {"iteration": state.iteration}


# ---------------------------------------------------------------- loop

METRIC_FIELDS = ("iter", "loss", "triplet", "ce", "lr")


def _record_line(rec: dict) -> str:
    # fixed field order; restored histories come back key-sorted from the manifest
    return json.dumps({k: rec[k] for k in METRIC_FIELDS}) + "\n"


def train_step(state: TrainState, store: SequenceStore) -> dict:
    cfg = state.config
    sc = cfg.sampler
    batch = sample_batch(store, sc.p, sc.k, sc.frames_per_sample, state.rng)
    lr = cfg.optimizer.lr_at(state.iteration)
    state.model.train()
    state.model.zero_grad()
    emb = state.model(batch.x)
    losses = combined(emb.parts, emb.logits, batch.labels, cfg.loss)
    vals = losses.values()
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingAborted(f"non-finite loss at iteration {state.iteration}: {vals}",
                              iteration=state.iteration, batch_indices=batch.indices.tolist())
    losses.total.backward()
    state.optimizer.step(lr)
    rec = {"iter": state.iteration, "loss": vals["loss"], "triplet": vals["triplet"], "ce": vals["ce"], "lr": lr}
    state.history.append(rec)
    state.iteration += 1
    return rec


def open_store(cfg: ExperimentConfig, data=None, split: str = "train", threads: int = 1) -> SequenceStore:
    if isinstance(data, SequenceStore):
        return data
    root = data if data is not None else cfg.data_root
    if root is None:
        raise ConfigError("no dataset given (data_root unset)")
    index = DatasetIndex.load(root)
    return SequenceStore.from_index(index, split, threads=threads)


def train(cfg: ExperimentConfig, data=None, out_dir=None, resume=None, threads: int = 1,
          until: int | None = None) -> TrainState:
    """Run (or continue) training up to ``cfg.total_iters`` (or ``until``).

    ``data`` is a dataset root or a SequenceStore of the train split. With
    ``out_dir`` the metrics log, the wall-clock sidecar and checkpoints are
    written there. ``resume`` is a checkpoint path or a TrainState.
    """
    store = open_store(cfg, data, "train", threads)
    if cfg.backbone.num_classes < len(store.by_label):
        raise ConfigError(f"backbone.num_classes={cfg.backbone.num_classes} < {len(store.by_label)} train subjects")
    if isinstance(resume, TrainState):
        state = resume
    elif resume is not None:
        state = restore_state(resume, cfg)
    else:
        state = new_state(cfg)
    stop = cfg.total_iters if until is None else min(until, cfg.total_iters)
    out = Path(out_dir) if out_dir is not None else None
    metrics = timing = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.to_yaml())
        # rewrite the log from the restored history so a resumed run's log
        # matches an uninterrupted one
        metrics = (out / METRICS_NAME).open("w")
        metrics.writelines(_record_line(r) for r in state.history)
        timing = (out / TIMING_NAME).open("a" if resume is not None else "w")
    try:
        with threadpool_limits(limits=1):
            while state.iteration < stop:
                t0 = time.perf_counter()
                try:
                    rec = train_step(state, store)
                except TrainingAborted as exc:
                    if out is not None:
                        dump = {"iteration": exc.iteration, "batch_indices": exc.batch_indices,
                                "sequences": [_seq_id(store, i) for i in exc.batch_indices], "message": str(exc)}
                        (out / "abort.json").write_text(json.dumps(dump, indent=1) + "\n")
                    raise
                if metrics is not None:
                    metrics.write(_record_line(rec))
                    metrics.flush()
                    ms = (time.perf_counter() - t0) * 1000.0
                    timing.write(json.dumps({"iter": rec["iter"], "wall_ms": round(ms, 3)}) + "\n")
                every = cfg.checkpoint_every
                if out is not None and every and state.iteration % every == 0:
                    state.save(out / f"ckpt_{state.iteration:07d}.gckp")
                if state.iteration % 50 == 0:
                    log.info("iter %d loss %.4f", state.iteration, rec["loss"])
    finally:
        if metrics is not None:
            metrics.close()
            timing.close()
    if out is not None:
        state.save(out / FINAL_NAME)
    return state


def _seq_id(store: SequenceStore, row: int) -> str:
    s = store.sequences[row]
    return f"{s.subject_id}/{s.condition}-{s.seq_no:02d}/{s.view_deg:03d}"
