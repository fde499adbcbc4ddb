"""Procedural binary silhouettes of an articulated 2-D stick walker.

Each subject has latent body and gait parameters. A frame is rendered by
posing the skeleton at gait phase ``2*pi*f*t + phase``, projecting the joint
positions for the camera view with a horizontal shear and scale, and
rasterizing thick limb strokes. BG attaches a blob to one hand and CL widens
the torso.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .dataset import DatasetIndex, SequenceEntry
from .sequence import CONDITIONS, SilhouetteSequence, save_sequence, sequence_relpath

logger = logging.getLogger(__name__)

PRESETS = ("general", "motion_dominant")


@dataclass
class SubjectParams:
    limb_scale: float
    torso_width: float
    stride_freq: float
    phase: float
    arm_swing: float


@dataclass
class SynthConfig:
    """Everything that determines a synthetic dataset.

    ``conditions`` maps condition name to the number of walks recorded per
    view. ``preset="motion_dominant"`` gives every subject the same body and
    arm swing and spaces stride frequencies evenly across the range, so only
    the motion tells subjects apart.
    """

    n_subjects: int = 8
    views: list = field(default_factory=lambda: [0, 30, 60, 90])
    conditions: dict = field(default_factory=lambda: {"NM": 2, "CL": 1})
    frames_per_seq: int = 30
    height: int = 128
    width: int = 96
    preset: str = "general"
    freq_range: tuple = (0.04, 0.11)
    limb_scale_range: tuple = (0.85, 1.15)
    torso_width_range: tuple = (7.0, 13.0)
    arm_swing_range: tuple = (0.25, 0.7)
    stroke: float = 5.0
    bag_radius: float = 8.0
    coat_dilation: float = 1.8
    flip_prob: float = 0.0
    test_subjects: int = 0
    min_clip_len: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if not self.views:
            raise ConfigError("views must be non-empty")
        if any(not 0 <= int(v) < 360 for v in self.views):
            raise ConfigError("views must lie in [0, 360)")
        if len(set(int(v) for v in self.views)) != len(self.views):
            raise ConfigError("views must be distinct")
        for cond, count in self.conditions.items():
            if cond not in CONDITIONS:
                raise ConfigError(f"unknown condition {cond!r}; expected one of {CONDITIONS}")
            if int(count) < 1:
                raise ConfigError(f"condition {cond} needs at least one sequence")
        lo, hi = self.freq_range
        if not (0 < lo <= hi):
            raise ConfigError("stride frequency must be > 0 (freq_range = (lo, hi), 0 < lo <= hi)")
        if self.frames_per_seq < 2 * self.min_clip_len:
            raise ConfigError(f"frames_per_seq must be >= 2 * clip length ({2 * self.min_clip_len})")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if not 0 <= self.test_subjects < self.n_subjects:
            raise ConfigError("test_subjects must be in [0, n_subjects)")
        if not 0.0 <= self.flip_prob < 0.5:
            raise ConfigError("flip_prob must be in [0, 0.5)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("freq_range", "limb_scale_range", "torso_width_range", "arm_swing_range"):
            if key in doc:
                doc[key] = tuple(float(v) for v in doc[key])
        if "views" in doc:
            doc["views"] = [int(v) for v in doc["views"]]
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("freq_range", "limb_scale_range", "torso_width_range", "arm_swing_range"):
            d[key] = list(d[key])
        return d


def motion_dominant(**overrides) -> SynthConfig:
    """Identical bodies, distinct stride frequency and phase."""
    base = dict(n_subjects=8, views=[0, 30, 60, 90], conditions={"NM": 2, "CL": 1},
                frames_per_seq=30, preset="motion_dominant")
    base.update(overrides)
    cfg = SynthConfig(**base)
    cfg.validate()
    return cfg


def subject_params(cfg: SynthConfig) -> list[SubjectParams]:
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.n_subjects
    lo, hi = cfg.freq_range
    if cfg.preset == "motion_dominant":
        freqs = rng.permutation(np.linspace(lo, hi, n)) if n > 1 else np.array([lo])
        out = []
        for i in range(n):
            out.append(SubjectParams(
                limb_scale=1.0,
                torso_width=float(np.mean(cfg.torso_width_range)),
                stride_freq=float(freqs[i]),
                phase=float(rng.uniform(0, 2 * math.pi)),
                arm_swing=float(np.mean(cfg.arm_swing_range)),
            ))
        return out
    out = []
    for _ in range(n):
        out.append(SubjectParams(
            limb_scale=float(rng.uniform(*cfg.limb_scale_range)),
            torso_width=float(rng.uniform(*cfg.torso_width_range)),
            stride_freq=float(rng.uniform(lo, hi)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            arm_swing=float(rng.uniform(*cfg.arm_swing_range)),
        ))
    return out


def _skeleton(params: SubjectParams, phi: float, height: int, width: int):
    """Joint positions (x right, y down) for gait phase ``phi``; side view."""
    s = params.limb_scale
    thigh, shin = 26.0 * s, 26.0 * s
    torso, upper_arm, forearm = 34.0 * s, 18.0 * s, 16.0 * s
    head_r = 8.0 * s
    cx = width / 2.0
    ground = height - 8.0
    # the stance leg sets the hip height; small bob at twice the stride rate
    hip_y = ground - (thigh + shin) * 0.97 + 1.5 * math.cos(2 * phi)
    hip = (cx, hip_y)
    neck = (cx + 2.0, hip_y - torso)
    head = (neck[0] + 1.0, neck[1] - head_r - 2.0)
    legs = []
    for offset in (0.0, math.pi):
        a = phi + offset
        hip_angle = 0.45 * math.sin(a)
        knee_bend = 0.6 * max(0.0, math.sin(a + math.pi / 2)) ** 2
        knee = (hip[0] + thigh * math.sin(hip_angle), hip[1] + thigh * math.cos(hip_angle))
        shin_angle = hip_angle - knee_bend
        foot = (knee[0] + shin * math.sin(shin_angle), knee[1] + shin * math.cos(shin_angle))
        legs.append((hip, knee, foot))
    arms = []
    for offset in (math.pi, 0.0):
        a = phi + offset
        shoulder_angle = params.arm_swing * math.sin(a)
        elbow = (neck[0] + upper_arm * math.sin(shoulder_angle), neck[1] + 3.0 + upper_arm * math.cos(shoulder_angle))
        fa = shoulder_angle + 0.35 + 0.2 * max(0.0, math.sin(a))
        hand = (elbow[0] + forearm * math.sin(fa), elbow[1] + forearm * math.cos(fa))
        arms.append(((neck[0], neck[1] + 3.0), elbow, hand))
    return {"hip": hip, "neck": neck, "head": head, "head_r": head_r, "legs": legs, "arms": arms}


def _project(pt, view_deg: float, anchor, side: float):
    """Horizontal scale+shear for a camera at ``view_deg``; ``side`` is +-1 for limb depth."""
    th = math.radians(view_deg)
    scale = 0.3 + 0.7 * abs(math.sin(th))
    shear = 0.2 * math.cos(th)
    depth = 5.0 * abs(math.cos(th)) * side
    x = anchor[0] + scale * (pt[0] - anchor[0]) + shear * (anchor[1] - pt[1]) + depth
    return (x, pt[1])


def _stroke(canvas_x, canvas_y, a, b, radius):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg = dx * dx + dy * dy
    if seg == 0:
        t = np.zeros_like(canvas_x)
    else:
        t = np.clip(((canvas_x - ax) * dx + (canvas_y - ay) * dy) / seg, 0.0, 1.0)
    px = ax + t * dx - canvas_x
    py = ay + t * dy - canvas_y
    return px * px + py * py <= radius * radius


def render_frame(params: SubjectParams, t: float, view_deg: float, condition: str,
                 cfg: SynthConfig, phase: float | None = None) -> np.ndarray:
    phi = 2 * math.pi * params.stride_freq * t + (params.phase if phase is None else phase)
    sk = _skeleton(params, phi, cfg.height, cfg.width)
    yy, xx = np.mgrid[0: cfg.height, 0: cfg.width].astype(np.float64)
    anchor = sk["hip"]
    r = cfg.stroke / 2.0
    img = np.zeros((cfg.height, cfg.width), dtype=bool)

    def proj(p, side=0.0):
        return _project(p, view_deg, anchor, side)

    torso_r = params.torso_width / 2.0
    if condition == "CL":
        torso_r *= cfg.coat_dilation
    img |= _stroke(xx, yy, proj(sk["hip"]), proj(sk["neck"]), torso_r)
    hx, hy = proj(sk["head"])
    img |= (xx - hx) ** 2 + (yy - hy) ** 2 <= sk["head_r"] ** 2
    for side, (hip, knee, foot) in zip((1.0, -1.0), sk["legs"]):
        img |= _stroke(xx, yy, proj(hip, side), proj(knee, side), r * 1.3)
        img |= _stroke(xx, yy, proj(knee, side), proj(foot, side), r)
    for side, (shoulder, elbow, hand) in zip((1.0, -1.0), sk["arms"]):
        img |= _stroke(xx, yy, proj(shoulder, side), proj(elbow, side), r * 0.8)
        img |= _stroke(xx, yy, proj(elbow, side), proj(hand, side), r * 0.7)
    if condition == "BG":
        bx, by = proj(sk["arms"][0][2], 1.0)
        rb = cfg.bag_radius
        img |= ((xx - bx - 0.6 * rb) / (1.2 * rb)) ** 2 + ((yy - by - 0.4 * rb) / rb) ** 2 <= 1.0
    return img.astype(np.uint8)


def _boundary(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, 1)
    neighbours = pad[:-2, 1:-1] | pad[2:, 1:-1] | pad[1:-1, :-2] | pad[1:-1, 2:]
    inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return (neighbours.astype(bool) & ~inner.astype(bool))


def render_sequence(params: SubjectParams, view_deg: float, condition: str, cfg: SynthConfig,
                    start_phase: float, rng: np.random.Generator | None = None) -> np.ndarray:
    frames = np.stack([
        render_frame(params, t, view_deg, condition, cfg, phase=start_phase)
        for t in range(cfg.frames_per_seq)
    ])
    if cfg.flip_prob > 0 and rng is not None:
        for k in range(frames.shape[0]):
            edge = _boundary(frames[k])
            flips = edge & (rng.random(edge.shape) < cfg.flip_prob)
            frames[k] ^= flips.astype(np.uint8)
    return frames


def _walk_phase(cfg: SynthConfig, params: SubjectParams, subject: int, cond_idx: int, seq_no: int) -> float:
    if seq_no == 1 and cond_idx == 0:
        return params.phase
    rng = np.random.default_rng([cfg.seed, 2, subject, cond_idx, seq_no])
    return float(rng.uniform(0, 2 * math.pi))


def subject_name(i: int) -> str:
    return f"{i + 1:03d}"


def generate_synthetic(cfg: SynthConfig, root, threads: int = 1) -> DatasetIndex:
    """Render the full dataset tree under ``root`` and write ``index.json`` last."""
    cfg.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    params = subject_params(cfg)
    conds = [c for c in CONDITIONS if c in cfg.conditions]
    jobs = []
    for s in range(cfg.n_subjects):
        for ci, cond in enumerate(conds):
            for seq_no in range(1, int(cfg.conditions[cond]) + 1):
                phase = _walk_phase(cfg, params[s], s, ci, seq_no)
                for vi, view in enumerate(cfg.views):
                    jobs.append((s, ci, cond, seq_no, vi, int(view), phase))

    def work(job):
        s, ci, cond, seq_no, vi, view, phase = job
        rng = np.random.default_rng([cfg.seed, 3, s, ci, seq_no, vi])
        frames = render_sequence(params[s], view, cond, cfg, phase, rng)
        rel = sequence_relpath(subject_name(s), cond, seq_no, view)
        seq = SilhouetteSequence(frames, subject_name(s), cond, view, seq_no)
        save_sequence(seq, root / rel)
        return SequenceEntry(subject_name(s), cond, seq_no, view, rel, int(frames.shape[0]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(work, jobs))
    else:
        entries = [work(j) for j in jobs]

    names = [subject_name(s) for s in range(cfg.n_subjects)]
    n_test = cfg.test_subjects
    split = {"train": names[: len(names) - n_test], "test": names[len(names) - n_test:]}
    index = DatasetIndex(entries=entries, split=split, root=root,
                         extra={"synth": cfg.to_dict(),
                                "subjects": {n: asdict(p) for n, p in zip(names, params)}})
    index.write()
    logger.info("generated %d sequences for %d subjects under %s", len(entries), cfg.n_subjects, root)
    return index


def load_synth_config(doc: dict) -> SynthConfig:
    """Accept either a bare synth mapping or one nested under ``synth``."""
    if "synth" in doc:
        rest = set(doc) - {"synth"}
        if rest:
            raise ConfigError(f"unknown top-level keys in dataset config: {sorted(rest)}")
        doc = doc["synth"]
    return SynthConfig.from_dict(doc or {})


def dumps_config(cfg: SynthConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
