"""Staged expert-growing training, the co-training baseline and evaluation.

Every random draw is keyed by ``(seed, stream, stage, step)`` so a run
resumed from any checkpoint replays the same data and noise as an
uninterrupted run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import dataset, rng, synth
from .autodiff import Tensor
from .optim import Adam
from .prw import ModelConfig, PRWModel
from .routing import RoutingTrace, SupervisionConfig, soft_usage, total_loss, usage_ratio, veteran_loss

logger = logging.getLogger(__name__)

STAGE_TASKS = synth.TASKS
N_STAGES = len(STAGE_TASKS)


@dataclass(frozen=True)
class StageConfig:
    stage_index: int
    task: str
    rho: float = 0.8
    alpha: float = 0.5
    learning_rate: float = 1e-4
    iterations: int = 3000
    batch_size: int = 8
    lora_rank: int = 4
    lora_alpha: Optional[float] = None  # defaults to 2 * lora_rank
    train_base: Optional[bool] = None  # defaults to stage_index == 0

    def __post_init__(self):
        if not 0 <= self.stage_index < N_STAGES:
            raise ValueError(f"stage_index must be in [0, {N_STAGES - 1}], got {self.stage_index}")
        if self.task not in STAGE_TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.lora_rank < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and lora_rank >= 1 required")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        SupervisionConfig(self.rho, self.alpha)
        if self.lora_alpha is None:
            object.__setattr__(self, "lora_alpha", 2.0 * self.lora_rank)
        if self.train_base is None:
            object.__setattr__(self, "train_base", self.stage_index == 0)

    @property
    def supervision(self) -> SupervisionConfig:
        return SupervisionConfig(self.rho, self.alpha)


def default_stages(iterations: int = 3000, learning_rate: float = 1e-4, batch_size: int = 8,
                   lora_rank: int = 4, rho: float = 0.8, alpha: float = 0.5) -> List[StageConfig]:
    """Five stages in curriculum order; stage 0 has rho=1, alpha=0."""
    return [
        StageConfig(t, task, rho=1.0 if t == 0 else rho, alpha=0.0 if t == 0 else alpha,
                    learning_rate=learning_rate, iterations=iterations, batch_size=batch_size,
                    lora_rank=lora_rank)
        for t, task in enumerate(STAGE_TASKS)
    ]


def validate_stages(stages: Sequence[StageConfig]) -> None:
    for i, s in enumerate(stages):
        if s.stage_index != i:
            raise ValueError(f"stages[{i}].stage_index is {s.stage_index}; stages must run 0, 1, 2, ...")


@dataclass
class TrainState:
    model: PRWModel
    seed: int
    completed: List[StageConfig] = field(default_factory=list)
    step: int = 0  # global optimizer steps
    stage_step: int = 0  # steps done inside the active stage
    optimizer: Optional[Adam] = None
    mode: str = "staged"

    @property
    def active_stage(self) -> int:
        return len(self.completed)


@dataclass
class FlowSample:
    z1: np.ndarray
    z0: np.ndarray
    u: np.ndarray  # (B,)
    y: np.ndarray
    h: np.ndarray

    @property
    def x_u(self) -> np.ndarray:
        u = self.u[:, None, None]
        return (1.0 - u) * self.z0 + u * self.z1

    @property
    def v_target(self) -> np.ndarray:
        return self.z1 - self.z0


def open_unit(g: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    return g.integers(1, 2**53, size=n) / float(2**53)


def make_flow_sample(batch: synth.EncodedBatch, g: np.random.Generator) -> FlowSample:
    z0 = g.standard_normal(batch.z1.shape)
    return FlowSample(batch.z1, z0, open_unit(g, batch.z1.shape[0]), batch.y, batch.h)


def flow_matching_loss(model: PRWModel, sample: FlowSample, g: Optional[np.random.Generator] = None,
                       training: bool = True, forced=None, use_prw: bool = True):
    """Velocity MSE and the routing trace (``None`` without experts)."""
    c = model.config
    if sample.z1.shape[1:] != (c.len_x, c.x_features) or sample.z0.shape != sample.z1.shape:
        raise ad.ShapeError(f"flow sample z1 {sample.z1.shape} / z0 {sample.z0.shape} do not match the model")
    pred, decisions = model.forward(sample.x_u, sample.y, sample.h, sample.u, g,
                                    training=training, forced=forced, use_prw=use_prw)
    loss = ad.mse(pred, sample.v_target)
    trace = None
    if decisions and all(d is not None for d in decisions):
        trace = RoutingTrace.from_decisions(decisions)
    return loss, trace


# ----------------------------------------------------------------------------
# expert pool management


def set_trainable(model: PRWModel, cfg: StageConfig) -> List[str]:
    """Apply the stage's freezing policy; returns the trainable parameter names."""
    base = set(model.base_parameter_names())
    newest = model.n_experts - 1
    names = []
    for name, p in model.named_parameters().items():
        if name in base:
            flag = bool(cfg.train_base)
        elif ".router." in name:
            flag = True
        else:
            flag = name.split(".")[3] == str(newest)  # blocks.{i}.experts.{k}.{param}
        p.requires_grad = flag
        if flag:
            names.append(name)
    return names


def grow_expert_pool(state: TrainState, cfg: StageConfig) -> TrainState:
    """Append one zero-output expert per block and freeze the veterans."""
    n = state.model.n_experts
    if n != cfg.stage_index:
        raise ValueError(f"stage order violation: pool has {n} experts but stage_index is {cfg.stage_index}")
    state.model.add_expert(cfg.lora_rank, cfg.lora_alpha, rng.generator(state.seed, "init", cfg.stage_index + 1))
    set_trainable(state.model, cfg)
    return state


def params_digest(model: PRWModel, names: Iterable[str] = None) -> Dict[str, str]:
    params = model.named_parameters()
    names = params.keys() if names is None else names
    return {n: hashlib.sha256(params[n].data.tobytes()).hexdigest() for n in names}


def frozen_names(model: PRWModel) -> List[str]:
    return [n for n, p in model.named_parameters().items() if not p.requires_grad]


# ----------------------------------------------------------------------------
# data


def stage_batch(seed: int, task: str, step: int, batch_size: int) -> synth.EncodedBatch:
    """Training batch ``step`` of ``task``: samples ``step*B .. step*B + B - 1``."""
    return synth.encode_batch(dataset.samples(task, seed, step * batch_size, batch_size))


# ----------------------------------------------------------------------------
# training loop


@dataclass
class MetricsRecord:
    step: int
    stage: int
    l_task: float
    l_veteran: float
    u_hard: float
    u_soft: float
    expert_histogram: List[float]
    wall_ms: Optional[float] = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["wall_ms"] is None:
            del d["wall_ms"]
        return json.dumps(d, sort_keys=True)


class NonFiniteLoss(ad.NonFiniteError):
    pass


def _stage_optimizer(model: PRWModel, names: Sequence[str], lr: float) -> Adam:
    params = model.named_parameters()
    return Adam({n: params[n] for n in names}, lr=lr)


def train_step(state: TrainState, cfg: StageConfig, batch: synth.EncodedBatch,
               noise: np.random.Generator, timing: bool = False) -> MetricsRecord:
    t0 = time.perf_counter()
    model, opt = state.model, state.optimizer
    sample = make_flow_sample(batch, noise)
    task_loss, trace = flow_matching_loss(model, sample, noise, training=True)
    if trace is not None:
        u_soft = soft_usage(trace)
        vet = veteran_loss(u_soft, cfg.supervision)
        u_hard = usage_ratio(trace)
        hist = trace.histogram().tolist()
    else:
        u_soft, vet, u_hard, hist = Tensor(1.0), 0.0, 1.0, [1.0]
    for name, value in (("l_task", task_loss.item()), ("l_veteran", float(np.asarray(getattr(vet, "data", vet))))):
        if not np.isfinite(value):
            raise NonFiniteLoss(f"step {state.step} (stage {cfg.stage_index}): {name} = {value}")
    loss = total_loss(task_loss, vet)
    opt.zero_grad()
    ad.backward(loss)
    opt.step()
    wall = (time.perf_counter() - t0) * 1e3 if timing else None
    return MetricsRecord(state.step, cfg.stage_index, task_loss.item(),
                         float(np.asarray(getattr(vet, "data", vet))), float(u_hard), u_soft.item(), hist, wall)


def train_stage(state: TrainState, cfg: StageConfig, data: Callable[[int], synth.EncodedBatch] = None,
                on_metrics: Callable[[MetricsRecord], None] = None, timing: bool = False,
                checkpoint_every: int = 0, on_checkpoint: Callable[[TrainState], None] = None) -> TrainState:
    """Run the remaining steps of ``cfg`` from ``state.stage_step``.

    ``data(step)`` returns the batch for a step; the default draws seeded
    samples of the stage task. Requires the pool already grown for the stage.
    """
    model = state.model
    if model.n_experts != cfg.stage_index + 1 and state.mode == "staged":
        raise ValueError(f"stage {cfg.stage_index} needs {cfg.stage_index + 1} experts, pool has {model.n_experts}")
    if data is None:
        def data(step):
            return stage_batch(state.seed, cfg.task, step, cfg.batch_size)
    if state.optimizer is None:
        names = set_trainable(model, cfg)
        state.optimizer = _stage_optimizer(model, names, cfg.learning_rate)
    while state.stage_step < cfg.iterations:
        s = state.stage_step
        noise = rng.generator(state.seed, "noise", cfg.stage_index, s)
        rec = train_step(state, cfg, data(s), noise, timing)
        state.step += 1
        state.stage_step += 1
        if on_metrics is not None:
            on_metrics(rec)
        if checkpoint_every and on_checkpoint is not None and state.stage_step % checkpoint_every == 0 \
                and state.stage_step < cfg.iterations:
            on_checkpoint(state)
    return state


def finish_stage(state: TrainState, cfg: StageConfig) -> None:
    state.completed.append(cfg)
    state.stage_step = 0
    state.optimizer = None


def new_state(model_cfg: ModelConfig, seed: int, mode: str = "staged") -> TrainState:
    model = PRWModel(model_cfg, rng.generator(seed, "init", 0))
    return TrainState(model=model, seed=seed, mode=mode)


class MetricsWriter:
    """Append-only JSONL metrics with truncation on resume."""

    def __init__(self, path: Path, resume_step: int = 0):
        self.path = Path(path)
        kept = []
        if resume_step and self.path.exists():
            for line in self.path.read_text().splitlines():
                if json.loads(line)["step"] < resume_step:
                    kept.append(line + "\n")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(kept))
        self._fh = self.path.open("a", encoding="utf-8")

    def __call__(self, rec: MetricsRecord) -> None:
        self._fh.write(rec.to_json() + "\n")

    def close(self) -> None:
        self._fh.close()


def run_curriculum(stages: Sequence[StageConfig], model_cfg: ModelConfig, seed: int,
                   out_dir=None, resume: Optional[TrainState] = None, timing: bool = False,
                   checkpoint_every: int = 0, on_metrics: Callable[[MetricsRecord], None] = None) -> TrainState:
    """Grow, train and checkpoint each stage in order.

    With ``out_dir`` set, writes ``metrics.jsonl`` and ``checkpoints/stage_{t}``
    (plus ``checkpoints/latest`` for mid-stage saves). ``resume`` continues
    from a loaded state.
    """
    from . import checkpoint

    validate_stages(stages)
    state = resume if resume is not None else new_state(model_cfg, seed)
    writer = None
    sinks = [on_metrics] if on_metrics else []
    if out_dir is not None:
        out_dir = Path(out_dir)
        writer = MetricsWriter(out_dir / "metrics.jsonl", resume_step=state.step)
        sinks.append(writer)

    def emit(rec):
        for s in sinks:
            s(rec)

    def save_latest(st):
        if out_dir is not None:
            checkpoint.save(out_dir / "checkpoints" / "latest", st, stages)

    try:
        for cfg in stages[state.active_stage:]:
            if state.stage_step == 0 and state.model.n_experts == cfg.stage_index:
                grow_expert_pool(state, cfg)
            logger.info("stage %d (%s): %d iterations", cfg.stage_index, cfg.task, cfg.iterations)
            train_stage(state, cfg, on_metrics=emit, timing=timing,
                        checkpoint_every=checkpoint_every, on_checkpoint=save_latest)
            finish_stage(state, cfg)
            if out_dir is not None:
                checkpoint.save(out_dir / "checkpoints" / f"stage_{cfg.stage_index}", state, stages)
    finally:
        if writer is not None:
            writer.close()
    return state


# ----------------------------------------------------------------------------
# co-training baseline


def cotrain_schedule(stages: Sequence[StageConfig], seed: int) -> List[Tuple[int, int]]:
    """The staged run's ``(stage, step)`` batches in a seeded shuffled order."""
    order = [(s.stage_index, k) for s in stages for k in range(s.iterations)]
    perm = rng.generator(seed, "order").permutation(len(order))
    return [order[i] for i in perm]


def run_cotrain(stages: Sequence[StageConfig], model_cfg: ModelConfig, seed: int, out_dir=None,
                timing: bool = False, on_metrics: Callable[[MetricsRecord], None] = None) -> TrainState:
    """Single-expert model trained on every stage's batches, shuffled together.

    Uses exactly the staged run's samples and step count, with the base
    trainable throughout and no routing supervision.
    """
    from . import checkpoint

    validate_stages(stages)
    state = new_state(model_cfg, seed, mode="cotrain")
    first = stages[0]
    cfg = replace(first, rho=1.0, alpha=0.0, train_base=True,
                  iterations=sum(s.iterations for s in stages))
    grow_expert_pool(state, cfg)
    schedule = cotrain_schedule(stages, seed)

    def data(step):
        t, k = schedule[step]
        s = stages[t]
        return stage_batch(seed, s.task, k, s.batch_size)

    writer = None
    sinks = [on_metrics] if on_metrics else []
    if out_dir is not None:
        writer = MetricsWriter(Path(out_dir) / "metrics.jsonl")
        sinks.append(writer)
    try:
        train_stage(state, cfg, data, on_metrics=lambda r: [s(r) for s in sinks], timing=timing)
    finally:
        if writer is not None:
            writer.close()
    finish_stage(state, cfg)
    if out_dir is not None:
        checkpoint.save(Path(out_dir) / "checkpoints" / "cotrain", state, [cfg])
    return state


# ----------------------------------------------------------------------------
# evaluation


def evaluate(model: PRWModel, seed: int, n_samples: int = 64, tasks: Sequence[str] = STAGE_TASKS,
             batch_size: int = 32) -> Dict[str, float]:
    """Held-out velocity MSE per task at inference (no router noise).

    Samples and flow noise come from the ``eval`` stream, so two models
    evaluated with the same seed see identical inputs.
    """
    out = {}
    for ti, task in enumerate(tasks):
        total, count = 0.0, 0
        for start in range(0, n_samples, batch_size):
            n = min(batch_size, n_samples - start)
            batch = synth.encode_batch(dataset.samples(task, seed, start, n, stream="eval"))
            # the trailing 1 keeps flow noise apart from the sample streams
            g = rng.generator(seed, "eval", synth.TASKS.index(task), start, 1)
            loss, _ = flow_matching_loss(model, make_flow_sample(batch, g), None, training=False)
            total += loss.item() * n
            count += n
        out[task] = total / count
    out["combined"] = float(np.mean([out[t] for t in tasks]))
    return out


def euler_sample(model: PRWModel, y: np.ndarray, h: np.ndarray, n_steps: int = 20,
                 g: Optional[np.random.Generator] = None) -> np.ndarray:
    """Integrate the predicted velocity from noise at u=0 to u=1."""
    g = np.random.default_rng(0) if g is None else g
    c = model.config
    x = g.standard_normal((y.shape[0], c.len_x, c.x_features))
    dt = 1.0 / n_steps
    for i in range(n_steps):
        u = np.full(y.shape[0], i * dt)
        pred, _ = model.forward(x, y, h, u, None, training=False)
        x = x + dt * pred.data
    return x


# ----------------------------------------------------------------------------
# router-only fitting


@dataclass
class RouterFit:
    usage: float  # soft usage with router noise, averaged over fresh draws
    inference_usage: float  # soft usage with the noise term omitted


def fit_router(model: PRWModel, h_tokens: np.ndarray, cfg: SupervisionConfig, steps: int,
               lr: float = 3e-2, seed: int = 0, on_step: Callable[[int, float, float], None] = None,
               eval_draws: int = 200) -> RouterFit:
    """Train only the routers to hit usage ``cfg.rho`` on fixed source tokens.

    The source-stream embedding is run once; each step routes every block's
    input with fresh router noise and minimises the veteran loss alone. The
    fitted usage is the noisy soft usage (the quantity the loss sees),
    averaged over ``eval_draws`` draws not used in training.
    """
    from .prw import compute_router_logits, select_expert

    # expert residuals are zero-initialised, so each block's source input
    # does not depend on routing and can be computed once
    n = h_tokens.shape[0]
    c = model.config
    triple = model.embed_streams(np.zeros((n, c.len_x, c.x_features)), np.zeros((n, c.len_y, c.y_features)),
                                 h_tokens, np.full(n, 0.5))
    inputs = []
    for b in model.blocks:
        inputs.append(Tensor(triple.h.data))
        triple, _ = b.forward(triple, None, training=False, use_prw=False)
    routers = {f"blocks.{i}.router.{n}": t for i, b in enumerate(model.blocks)
               for n, t in b.router.parameters().items()}
    for t in routers.values():
        t.requires_grad = True
    opt = Adam(routers, lr=lr)

    def usage(training, g=None):
        decisions = [select_expert(compute_router_logits(h, b.router, g, noise_enabled=training))
                     for h, b in zip(inputs, model.blocks)]
        return soft_usage(RoutingTrace.from_decisions(decisions))

    for step in range(steps):
        g = rng.generator(seed, "noise", 0, step)
        u = usage(True, g)
        loss = veteran_loss(u, cfg)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if on_step is not None:
            on_step(step, u.item(), loss.item())
    noisy = [usage(True, rng.generator(seed, "eval", 0, k)).item() for k in range(eval_draws)]
    return RouterFit(float(np.mean(noisy)), usage(False).item())
