"""Gradient checks and routing statistics."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import rng, synth
from .autodiff import Tensor
from .prw import ModelConfig, PRWModel
from .routing import RoutingTrace, SupervisionConfig, soft_usage, total_loss, usage_ratio, veteran_loss
from .trainer import FlowSample, flow_matching_loss, make_flow_sample

GRADCHECK_MAX_D = 16
GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5


def param_group(name: str) -> str:
    """``blocks.0.shared.q`` -> ``shared``; ``embed.x`` -> ``embed``."""
    parts = name.split(".")
    if parts[0] == "blocks":
        return parts[2]
    return parts[0]


@dataclass
class GradcheckReport:
    errors: "OrderedDict[str, float]"  # group -> max relative error
    veteran_grad_max: float  # largest |d L_veteran / d theta| over all parameters
    tolerance: float = GRADCHECK_TOL

    @property
    def failed(self) -> List[str]:
        return [g for g, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> List[str]:
        out = [f"{g:<10s} max relative error {e:.3e}  {'ok' if e < self.tolerance else 'FAIL'}"
               for g, e in self.errors.items()]
        out.append(f"veteran-loss gradient contribution (max abs): {self.veteran_grad_max:.3e}")
        return out


def gradcheck_model(config: ModelConfig, n_experts: int = 3, rank: int = 2, seed: int = 0) -> PRWModel:
    """A small model whose experts have non-zero up-projections."""
    if config.d_model > GRADCHECK_MAX_D:
        raise ValueError(f"gradcheck needs d_model <= {GRADCHECK_MAX_D}, got {config.d_model}")
    model = PRWModel(config, rng.generator(seed, "init", 0))
    g = rng.generator(seed, "init", 99)
    for _ in range(n_experts):
        model.add_expert(rank, 2.0 * rank, g)
    for name, p in model.named_parameters().items():
        p.requires_grad = True
        if ".b_" in name or ".router." in name:
            p.data = g.normal(0.0, 0.3, size=p.shape)
    return model


def gradcheck(model: PRWModel, n_samples: int = 2, supervision: SupervisionConfig = SupervisionConfig(),
              seed: int = 0, step: float = GRADCHECK_STEP, tolerance: float = GRADCHECK_TOL,
              groups: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Analytic vs. central-difference gradients of the total loss.

    Routing is held fixed at the unperturbed selection and the router noise
    draw is replayed on every evaluation, so the loss is smooth in every
    parameter. Inputs are random tokens of the model's shapes.
    """
    c = model.config
    g = rng.generator(seed, "eval", 7)
    sample = FlowSample(z1=g.uniform(-1, 1, (n_samples, c.len_x, c.x_features)),
                        z0=g.standard_normal((n_samples, c.len_x, c.x_features)),
                        u=g.uniform(0.05, 0.95, n_samples),
                        y=g.uniform(0, 1, (n_samples, c.len_y, c.y_features)),
                        h=g.uniform(-1, 1, (n_samples, c.len_h, c.h_features)))

    def noise():
        return rng.generator(seed, "noise", 7)

    _, trace = flow_matching_loss(model, sample, noise(), training=True)
    forced = None if trace is None else [s.copy() for s in trace.selected]

    def parts():
        task, tr = flow_matching_loss(model, sample, noise(), training=True, forced=forced)
        vet = veteran_loss(soft_usage(tr), supervision) if tr is not None else Tensor(0.0)
        return task, vet

    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    task, vet = parts()
    ad.backward(vet) if isinstance(vet, Tensor) and vet.requires_grad else None
    vet_max = max((float(np.abs(p.grad).max()) for p in params.values() if p.grad is not None), default=0.0)
    for p in params.values():
        p.grad = None
    ad.backward(total_loss(*parts()))
    analytic = {n: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for n, p in params.items()}

    def f():
        return total_loss(*parts()).item()

    errors: Dict[str, float] = OrderedDict()
    for name, p in params.items():
        grp = param_group(name)
        if groups is not None and grp not in groups:
            continue
        fd = ad.finite_difference_gradient(f, p, step)
        err = ad.relative_error(analytic[name], fd)
        errors[grp] = max(errors.get(grp, 0.0), err)
    for p in params.values():
        p.grad = None
    return GradcheckReport(errors, vet_max, tolerance)


@dataclass
class RouteStats:
    task: str
    n_experts: int
    u_hard: float  # share of decisions on the newest expert
    u_soft: float
    per_block: List[List[float]] = field(default_factory=list)
    overall: List[float] = field(default_factory=list)

    @property
    def underused(self) -> List[int]:
        return [k for k, v in enumerate(self.overall) if v < 0.01]


def route_stats(model: PRWModel, batch: synth.EncodedBatch, task: str) -> RouteStats:
    """Inference routing statistics for one batch of one task.

    Routing reads only the source stream, so the noisy-target inputs are
    irrelevant and set to zero.
    """
    if model.n_experts == 0:
        raise ValueError("model has no experts")
    c = model.config
    n = batch.h.shape[0]
    _, decisions = model.forward(np.zeros((n, c.len_x, c.x_features)), batch.y, batch.h,
                                 np.full(n, 0.5), None, training=False)
    trace = RoutingTrace.from_decisions(decisions)
    per_block = [np.bincount(s.reshape(-1), minlength=trace.n_experts) / s.size for s in trace.selected]
    return RouteStats(task, trace.n_experts, usage_ratio(trace), soft_usage(trace).item(),
                      [b.tolist() for b in per_block], trace.histogram().tolist())
