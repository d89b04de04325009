"""Usage-ratio supervision for the newest expert.

The hard usage ratio counts top-1 decisions that picked expert ``N-1``,
averaged over every block and token. It has zero gradient, so training
uses the mean gate probability of that expert instead (``soft_usage``)
and reports the hard ratio alongside.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prw import RoutingDecision


@dataclass(frozen=True)
class SupervisionConfig:
    rho: float = 0.8
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass
class RoutingTrace:
    """Per-block selections and gate probabilities for one forward pass."""

    selected: List[np.ndarray]
    gate_probs: List[Tensor]
    stage_expert: int

    @classmethod
    def from_decisions(cls, decisions: Sequence[RoutingDecision]) -> "RoutingTrace":
        if not decisions or any(d is None for d in decisions):
            raise ValueError("trace needs one routing decision per block")
        n = decisions[0].gate_probs.shape[-1]
        return cls([d.selected for d in decisions], [d.gate_probs for d in decisions], n - 1)

    @property
    def n_experts(self) -> int:
        return self.gate_probs[0].shape[-1]

    def __len__(self) -> int:
        return len(self.selected)

    def validate(self, n_blocks: int = None) -> None:
        if n_blocks is not None and len(self) != n_blocks:
            raise ValueError(f"trace has {len(self)} blocks, expected {n_blocks}")
        for sel in self.selected:
            if sel.size and sel.max() >= self.n_experts:
                raise ValueError("selected index exceeds pool size")

    def histogram(self) -> np.ndarray:
        """Fraction of hard decisions per expert over all blocks and tokens."""
        counts = np.zeros(self.n_experts)
        for sel in self.selected:
            counts += np.bincount(sel.reshape(-1), minlength=self.n_experts)
        return counts / counts.sum()


def usage_ratio(trace: RoutingTrace) -> float:
    if len(trace) == 0 or sum(s.size for s in trace.selected) == 0:
        raise ValueError("usage_ratio of an empty trace")
    hits = sum(int(np.count_nonzero(s == trace.stage_expert)) for s in trace.selected)
    total = sum(s.size for s in trace.selected)
    return hits / total


def soft_usage(trace: RoutingTrace) -> Tensor:
    """Mean probability mass on the supervised expert; differentiable."""
    k = trace.stage_expert
    per_block = [ad.mean(ad.slice_(p, -1, k, k + 1)) for p in trace.gate_probs]
    total = per_block[0]
    for t in per_block[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(per_block))


def veteran_loss(u: Union[float, Tensor], cfg: SupervisionConfig) -> Union[float, Tensor]:
    """``alpha * |u - rho|``; a float for a float ``u``, a tensor otherwise."""
    if isinstance(u, Tensor):
        return ad.mul(ad.abs_(ad.sub(u, cfg.rho)), cfg.alpha)
    return cfg.alpha * abs(float(u) - cfg.rho)


def total_loss(task_loss, vet_loss):
    """Sum of the task and veteran terms; both must be finite."""
    for name, v in (("task", task_loss), ("veteran", vet_loss)):
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.isfinite(val).all():
            raise ad.NonFiniteError(f"total_loss: non-finite {name} term")
    if isinstance(task_loss, Tensor) or isinstance(vet_loss, Tensor):
        return ad.add(task_loss, vet_loss)
    return float(task_loss) + float(vet_loss)
