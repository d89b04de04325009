"""Staged-versus-co-training comparison and hyperparameter sweeps."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import trainer
from .config import RunConfig
from .trainer import StageConfig

logger = logging.getLogger(__name__)

SWEEP_GRID = {
    "alpha": (0.0, 0.1, 0.5, 1.0),
    "rho": (0.6, 0.7, 0.8, 0.9, 1.0),
    "rank": (2, 4, 8, 16),
}
PAPER_BEST_RHO = 0.8


def compare(staged: Dict[str, float], cotrain: Dict[str, float]) -> Dict[str, float]:
    """Per-task ``staged - cotrain`` loss differences (negative favours staged)."""
    return {k: staged[k] - cotrain[k] for k in staged}


@dataclass
class SeedResult:
    seed: int
    staged: Dict[str, float]
    cotrain: Dict[str, float]

    @property
    def staged_wins(self) -> bool:
        return self.staged["combined"] <= self.cotrain["combined"]


@dataclass
class DualityResult:
    seeds: List[SeedResult] = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(r.staged_wins for r in self.seeds)

    def table(self) -> str:
        rows = [f"{'seed':>6s} {'staged':>10s} {'cotrain':>10s}  winner"]
        for r in self.seeds:
            rows.append(f"{r.seed:>6d} {r.staged['combined']:>10.5f} {r.cotrain['combined']:>10.5f}  "
                        f"{'staged' if r.staged_wins else 'cotrain'}")
        rows.append(f"staged wins on {self.wins} of {len(self.seeds)} seeds")
        return "\n".join(rows)

    def to_json(self) -> dict:
        return {"wins": self.wins, "n_seeds": len(self.seeds),
                "seeds": [{"seed": r.seed, "staged": r.staged, "cotrain": r.cotrain} for r in self.seeds]}


def duality_study(cfg: RunConfig, n_seeds: int = 5, out_dir=None) -> DualityResult:
    """Train staged and co-trained models per seed with equal budgets.

    Seeds are ``cfg.seed, cfg.seed + 1, ...``; each pair is evaluated on the
    same held-out samples.
    """
    result = DualityResult()
    for k in range(n_seeds):
        seed = cfg.seed + k
        model_cfg = replace(cfg.model, seed=seed)
        sub = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        staged = trainer.run_curriculum(cfg.stages, model_cfg, seed,
                                        None if sub is None else sub / "staged")
        cotrain = trainer.run_cotrain(cfg.stages, model_cfg, seed,
                                      None if sub is None else sub / "cotrain")
        eval_seed = seed + cfg.data.eval_seed_offset
        r = SeedResult(seed, trainer.evaluate(staged.model, eval_seed, cfg.data.eval_samples),
                       trainer.evaluate(cotrain.model, eval_seed, cfg.data.eval_samples))
        logger.info("seed %d: staged %.5f cotrain %.5f", seed, r.staged["combined"], r.cotrain["combined"])
        result.seeds.append(r)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "duality.json").write_text(json.dumps(result.to_json(), indent=1, sort_keys=True) + "\n")
    return result


@dataclass
class SweepResult:
    rows: List[dict] = field(default_factory=list)

    def best(self, axis: str):
        rows = [r for r in self.rows if r["axis"] == axis]
        return min(rows, key=lambda r: r["combined"])["value"]

    def table(self) -> str:
        lines = [f"{'axis':>6s} {'value':>6s} {'combined':>10s} {'edit':>10s}"]
        for r in self.rows:
            lines.append(f"{r['axis']:>6s} {r['value']:>6g} {r['combined']:>10.5f} {r['instruction_edit']:>10.5f}")
        for axis in SWEEP_GRID:
            if any(r["axis"] == axis for r in self.rows):
                lines.append(f"best {axis}: {self.best(axis):g}")
        if any(r["axis"] == "rho" for r in self.rows):
            best = self.best("rho")
            lines.append(f"best rho {best:g} vs reference optimum {PAPER_BEST_RHO:g}: "
                         f"{'agrees' if best == PAPER_BEST_RHO else 'differs'}")
        return "\n".join(lines)


def sweep(cfg: RunConfig, axes: Sequence[str] = tuple(SWEEP_GRID), out_dir=None) -> SweepResult:
    """Retrain the last stage with one hyperparameter varied at a time.

    Stages before the last are trained once and shared by every variant;
    other hyperparameters keep the config's last-stage values.
    """
    stages = list(cfg.stages)
    head = trainer.run_curriculum(stages[:-1], cfg.model, cfg.seed)
    from . import checkpoint
    import tempfile

    result = SweepResult()
    last = stages[-1]
    eval_seed = cfg.seed + cfg.data.eval_seed_offset
    with tempfile.TemporaryDirectory() as tmp:
        base_dir = checkpoint.save(Path(tmp) / "head", head, stages[:-1])
        for axis in axes:
            for value in SWEEP_GRID[axis]:
                if axis == "rank" and value > cfg.model.d_model:
                    continue
                if axis == "alpha":
                    variant = replace(last, alpha=float(value))
                elif axis == "rho":
                    variant = replace(last, rho=float(value))
                else:
                    variant = replace(last, lora_rank=int(value), lora_alpha=2.0 * value)
                state = checkpoint.load(base_dir)
                state = trainer.run_curriculum(stages[:-1] + [variant], cfg.model, cfg.seed, resume=state)
                losses = trainer.evaluate(state.model, eval_seed, cfg.data.eval_samples)
                row = {"axis": axis, "value": value, **losses}
                logger.info("sweep %s=%g combined %.5f", axis, value, losses["combined"])
                result.rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(json.dumps(result.rows, indent=1, sort_keys=True) + "\n")
    return result
