"""Train every SiMo/FeMo toggle combination on identical data and seeds, and compare."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import RankReport, evaluate
from .simo import SimoConfig
from .training import ExperimentConfig, open_store, train

VARIANTS = (
    ("plain", False, False),
    ("simo", True, False),
    ("femo", False, True),
    ("full", True, True),
)


def variant_config(base: ExperimentConfig, simo: bool, femo: bool) -> ExperimentConfig:
    """``base`` with the motion modules switched on or off.

    Switching a module on reuses the base settings when it has them (the
    SimoConfig, the per-stage FeMo flags) and falls back to the defaults
    (FeMo on every stage after the first) otherwise.
    """
    cfg = copy.deepcopy(base)
    bb = cfg.backbone
    if simo:
        bb.simo = bb.simo or SimoConfig()
    else:
        bb.simo = None
    n = len(bb.stage_channels)
    if femo:
        if not any(bb.femo_enabled):
            bb.femo_enabled = [False] + [True] * (n - 1) if n > 1 else [True]
    else:
        bb.femo_enabled = [False] * n
    bb.validate()
    cfg.validate()
    return cfg


@dataclass
class AblationReport:
    conditions: list
    seeds: list
    reports: dict = field(default_factory=dict)   # (variant, seed) -> RankReport
    digests: dict = field(default_factory=dict)   # variant -> config digest

    def variants(self) -> list[str]:
        seen = []
        for v, _ in self.reports:
            if v not in seen:
                seen.append(v)
        return seen

    def condition_mean(self, variant: str, condition: str) -> float:
        vals = [self.reports[(variant, s)].condition_means.get(condition, math.nan) for s in self.seeds]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def mean(self, variant: str) -> float:
        """Overall mean rank-1 averaged over seeds."""
        return float(np.mean([self.reports[(variant, s)].mean for s in self.seeds]))

    def to_dict(self) -> dict:
        out = {"conditions": list(self.conditions), "seeds": list(self.seeds), "variants": {}}
        for v in self.variants():
            out["variants"][v] = {
                "config_digest": self.digests.get(v),
                "condition_mean": {c: _clean(self.condition_mean(v, c)) for c in self.conditions},
                "mean": _clean(self.mean(v)),
                "per_seed_mean": {str(s): _clean(self.reports[(v, s)].mean) for s in self.seeds},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        head = f"{'Variant':<8}" + "".join(f"{c:>8}" for c in self.conditions) + f"{'Mean':>8}"
        lines = [head, "-" * len(head)]
        for v in self.variants():
            cells = "".join(f"{self.condition_mean(v, c):8.1f}" for c in self.conditions)
            lines.append(f"{v:<8}" + cells + f"{self.mean(v):8.1f}")
        lines.append(f"seeds: {', '.join(str(s) for s in self.seeds)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> list[Path]:
        base = Path(path)
        base.parent.mkdir(parents=True, exist_ok=True)
        txt, js = base.with_suffix(".txt"), base.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(self.to_json())
        return [txt, js]


def _clean(x: float):
    return None if math.isnan(x) else round(float(x), 10)


def ablation_run(base: ExperimentConfig, data=None, seeds=(0, 1, 2), variants=VARIANTS,
                 out_dir=None, threads: int = 1, progress=None) -> AblationReport:
    """Train and evaluate each variant for each seed on the same data.

    ``variants`` is a sequence of ``(name, simo_on, femo_on)``. Evaluation
    follows ``base.eval`` (its split decides which subjects are ranked).
    """
    train_store = open_store(base, data, "train", threads)
    eval_store = train_store if base.eval.split == "train" else open_store(base, data, base.eval.split, threads)
    reports: dict = {}
    digests: dict = {}
    conditions: list = []
    for name, simo, femo in variants:
        cfg0 = variant_config(base, simo, femo)
        digests[name] = cfg0.digest()
        for seed in seeds:
            cfg = copy.deepcopy(cfg0)
            cfg.seed = int(seed)
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            state = train(cfg, train_store, out_dir=run_dir)
            rep: RankReport = evaluate(state.model, eval_store, cfg.eval)
            if run_dir is not None:
                rep.write(run_dir / "report")
            reports[(name, int(seed))] = rep
            conditions += [c for c in rep.conditions if c not in conditions]
            if progress is not None:
                progress(name, seed, rep)
    return AblationReport(conditions=conditions, seeds=[int(s) for s in seeds], reports=reports, digests=digests)
