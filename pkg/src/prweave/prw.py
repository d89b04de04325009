"""Routed low-rank KV experts inside a three-stream attention block.

Each block holds one shared QKV/output projection used by both the noisy
stream ``x`` and the source stream ``h``, a separate projection for the
condition stream ``y``, a noisy router and a pool of low-rank experts that
add a residual to the source stream's keys and values.

Shapes throughout are ``(B, L, d)``: batch, tokens, width.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    len_x: int = 16
    len_y: int = 24
    len_h: int = 16
    seed: int = 0
    # per-token input/output feature widths of the three streams
    x_features: int = 48
    y_features: int = 78
    h_features: int = 64
    time_features: int = 9

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        for name in ("len_x", "len_y", "len_h", "x_features", "y_features", "h_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class LowRankExpert:
    """Residual KV projection ``scale * (h A) B`` for keys and for values.

    The up-projections start at zero so a fresh expert contributes nothing.
    """

    def __init__(self, d_model: int, rank: int, lora_alpha: float, rng: np.random.Generator):
        if not 1 <= rank <= d_model:
            raise ValueError(f"rank must be in [1, {d_model}], got {rank}")
        std = 1.0 / np.sqrt(d_model)
        self.rank = rank
        self.lora_alpha = float(lora_alpha)
        self.a_k = Tensor(_normal(rng, (d_model, rank), std), requires_grad=True)
        self.b_k = Tensor(np.zeros((rank, d_model)), requires_grad=True)
        self.a_v = Tensor(_normal(rng, (d_model, rank), std), requires_grad=True)
        self.b_v = Tensor(np.zeros((rank, d_model)), requires_grad=True)

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.rank

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(a_k=self.a_k, b_k=self.b_k, a_v=self.a_v, b_v=self.b_v)

    @property
    def trainable(self) -> bool:
        return self.a_k.requires_grad

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    def __call__(self, h: Tensor):
        dk = ad.matmul(ad.matmul(h, self.a_k), self.b_k) * self.scale
        dv = ad.matmul(ad.matmul(h, self.a_v), self.b_v) * self.scale
        return dk, dv


class ExpertPool:
    def __init__(self, experts: Sequence[LowRankExpert] = ()):
        self.experts: List[LowRankExpert] = list(experts)

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i) -> LowRankExpert:
        return self.experts[i]

    @property
    def trainable(self) -> List[bool]:
        return [e.trainable for e in self.experts]

    def append(self, expert: LowRankExpert) -> None:
        self.experts.append(expert)

    def freeze_veterans(self) -> None:
        """Make only the newest expert trainable."""
        for i, e in enumerate(self.experts):
            e.set_trainable(i == len(self.experts) - 1)


class RouterParams:
    """Routing and noise-scale projections, one column per expert."""

    def __init__(self, d_model: int, n_experts: int, noise_enabled: bool = True):
        self.w_r = Tensor(np.zeros((d_model, n_experts)), requires_grad=True)
        self.w_n = Tensor(np.zeros((d_model, n_experts)), requires_grad=True)
        self.noise_enabled = noise_enabled

    @property
    def n_experts(self) -> int:
        return self.w_r.shape[1]

    def grow(self) -> None:
        """Append a zero column to both projections."""
        for name in ("w_r", "w_n"):
            old = getattr(self, name)
            new = Tensor(np.concatenate([old.data, np.zeros((old.shape[0], 1))], axis=1),
                         requires_grad=old.requires_grad)
            setattr(self, name, new)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(w_r=self.w_r, w_n=self.w_n)

    def set_trainable(self, flag: bool) -> None:
        self.w_r.requires_grad = flag
        self.w_n.requires_grad = flag


@dataclass
class RoutingDecision:
    logits: Tensor
    noise_draw: np.ndarray
    gate_probs: Optional[Tensor] = None
    selected: Optional[np.ndarray] = None
    gate_value: Optional[Tensor] = None


@dataclass
class LatentTriple:
    x: Tensor
    y: Tensor
    h: Tensor

    def __post_init__(self):
        widths = {self.x.shape[-1], self.y.shape[-1], self.h.shape[-1]}
        if len(widths) != 1:
            raise ad.ShapeError(f"stream widths differ: {self.x.shape}, {self.y.shape}, {self.h.shape}")


def compute_router_logits(h: Tensor, router: RouterParams, rng: Optional[np.random.Generator],
                          noise_enabled: Optional[bool] = None) -> RoutingDecision:
    """Per-token logits ``h W_r + eps * softplus(h W_n)``; noise omitted at inference."""
    if h.shape[-1] != router.w_r.shape[0]:
        raise ad.ShapeError(f"router: token width {h.shape[-1]} != router rows {router.w_r.shape[0]}")
    noisy = router.noise_enabled if noise_enabled is None else noise_enabled
    clean = ad.matmul(h, router.w_r)
    if not noisy:
        return RoutingDecision(logits=clean, noise_draw=np.zeros(clean.shape))
    eps = rng.standard_normal(clean.shape)
    logits = ad.add(clean, ad.mul(ad.softplus(ad.matmul(h, router.w_n)), eps))
    return RoutingDecision(logits=logits, noise_draw=eps)


def select_expert(decision: RoutingDecision, forced: Optional[np.ndarray] = None) -> RoutingDecision:
    """Top-1 selection on the softmax of the logits, ties to the lowest index.

    The index is a constant of the backward pass; the gate value (selected
    probability) stays differentiable. ``forced`` pins the selection, which
    the gradient checks use to hold routing fixed under perturbation.
    """
    probs = ad.softmax(decision.logits)
    selected = np.argmax(probs.data, axis=-1) if forced is None else np.asarray(forced)
    n = probs.shape[-1]
    if selected.shape != probs.shape[:-1] or (selected.size and (selected.min() < 0 or selected.max() >= n)):
        raise IndexError(f"selection out of range for {n} experts")
    onehot = np.eye(n)[selected]
    gate = ad.sum_(ad.mul(probs, onehot), axis=-1, keepdims=True)
    decision.gate_probs = probs
    decision.selected = selected
    decision.gate_value = gate
    return decision


def adapt_kv(h: Tensor, pool: ExpertPool, decision: RoutingDecision, w_k: Tensor, w_v: Tensor):
    """Base KV projection of ``h`` plus the gated residual of each token's expert."""
    k_hat = ad.matmul(h, w_k)
    v_hat = ad.matmul(h, w_v)
    if decision is None or len(pool) == 0:
        return k_hat, v_hat
    selected = decision.selected
    if selected.size and selected.max() >= len(pool):
        raise IndexError(f"expert index {int(selected.max())} out of range for pool of {len(pool)}")
    for k, expert in enumerate(pool.experts):
        route = (selected == k)[..., None].astype(np.float64)
        if not route.any():
            continue
        weight = ad.mul(decision.gate_value, route)
        dk, dv = expert(h)
        k_hat = ad.add(k_hat, ad.mul(dk, weight))
        v_hat = ad.add(v_hat, ad.mul(dv, weight))
    return k_hat, v_hat


def source_self_attention(h: Tensor, k_hat: Tensor, v_hat: Tensor, q_h: Tensor,
                          w_o: Tensor, n_heads: int) -> Tensor:
    """``h + attn(Q_h, K_hat, V_hat) W_o`` with the shared output projection."""
    if q_h.shape[-1] % n_heads:
        raise ad.ShapeError(f"source attention: width {q_h.shape[-1]} not divisible by {n_heads}")
    return ad.add(h, ad.matmul(ad.attention(q_h, k_hat, v_hat, n_heads), w_o))


@dataclass
class Projections:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(q=self.q, k=self.k, v=self.v, o=self.o)


def stem_attention(x: Tensor, y: Tensor, h_updated: Tensor, shared: Projections,
                   text: Projections, n_heads: int):
    """Joint attention of x and y queries over keys/values of x, y and h_updated."""
    qx, kx, vx = ad.matmul(x, shared.q), ad.matmul(x, shared.k), ad.matmul(x, shared.v)
    qy, ky, vy = ad.matmul(y, text.q), ad.matmul(y, text.k), ad.matmul(y, text.v)
    kh, vh = ad.matmul(h_updated, shared.k), ad.matmul(h_updated, shared.v)
    k_all = ad.concat([kx, ky, kh], axis=1)
    v_all = ad.concat([vx, vy, vh], axis=1)
    out = ad.attention(ad.concat([qx, qy], axis=1), k_all, v_all, n_heads)
    lx = x.shape[1]
    ox = ad.slice_(out, 1, 0, lx)
    oy = ad.slice_(out, 1, lx, out.shape[1])
    x_out = ad.add(x, ad.matmul(ox, shared.o))
    y_out = ad.add(y, ad.matmul(oy, text.o))
    return x_out, y_out


class PRWBlock:
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, out_std: float = None):
        std = 1.0 / np.sqrt(d_model)
        out_std = std if out_std is None else out_std

        def proj():
            return Projections(*(Tensor(_normal(rng, (d_model, d_model), s), requires_grad=True)
                                 for s in (std, std, std, out_std)))

        self.d_model = d_model
        self.n_heads = n_heads
        self.shared = proj()
        self.text = proj()
        self.router = RouterParams(d_model, 0)
        self.pool = ExpertPool()

    def add_expert(self, rank: int, lora_alpha: float, rng: np.random.Generator) -> LowRankExpert:
        expert = LowRankExpert(self.d_model, rank, lora_alpha, rng)
        self.pool.append(expert)
        self.router.grow()
        return expert

    def parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for group, proj in (("shared", self.shared), ("text", self.text)):
            for n, t in proj.parameters().items():
                params[f"{group}.{n}"] = t
        for n, t in self.router.parameters().items():
            params[f"router.{n}"] = t
        for i, e in enumerate(self.pool.experts):
            for n, t in e.parameters().items():
                params[f"experts.{i}.{n}"] = t
        return params

    def forward(self, triple: LatentTriple, rng: Optional[np.random.Generator] = None,
                training: bool = True, forced: Optional[np.ndarray] = None, use_prw: bool = True):
        """Run one block; returns ``(LatentTriple, RoutingDecision or None)``."""
        h = triple.h
        decision = None
        if use_prw and len(self.pool):
            decision = compute_router_logits(h, self.router, rng, noise_enabled=training)
            select_expert(decision, forced)
            k_hat, v_hat = adapt_kv(h, self.pool, decision, self.shared.k, self.shared.v)
        else:
            k_hat, v_hat = adapt_kv(h, ExpertPool(), None, self.shared.k, self.shared.v)
        q_h = ad.matmul(h, self.shared.q)
        h_updated = source_self_attention(h, k_hat, v_hat, q_h, self.shared.o, self.n_heads)
        x_out, y_out = stem_attention(triple.x, triple.y, h_updated, self.shared, self.text, self.n_heads)
        return LatentTriple(x_out, y_out, h_updated), decision


def time_features(u: np.ndarray, n: int = 9) -> np.ndarray:
    """``[u, sin(2 pi k u), cos(2 pi k u)]`` for k = 1..(n-1)/2, shape (B, 1, n)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    ks = np.arange(1, (n - 1) // 2 + 1)
    feats = [u, np.sin(2 * np.pi * u * ks), np.cos(2 * np.pi * u * ks)]
    return np.concatenate(feats, axis=1)[:, None, :n]


class PRWModel:
    """Token embeddings, a stack of PRW blocks and a velocity read-out."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = c = config
        if rng is None:
            rng = np.random.default_rng(config.seed)
        d = c.d_model
        self.embed = OrderedDict(
            x=Tensor(_normal(rng, (c.x_features, d), 1 / np.sqrt(c.x_features)), requires_grad=True),
            y=Tensor(_normal(rng, (c.y_features, d), 1 / np.sqrt(c.y_features)), requires_grad=True),
            h=Tensor(_normal(rng, (c.h_features, d), 1 / np.sqrt(c.h_features)), requires_grad=True),
            t=Tensor(_normal(rng, (c.time_features, d), 1 / np.sqrt(c.time_features)), requires_grad=True),
        )
        self.pos = OrderedDict(
            x=Tensor(_normal(rng, (c.len_x, d), 0.1), requires_grad=True),
            y=Tensor(_normal(rng, (c.len_y, d), 0.1), requires_grad=True),
            h=Tensor(_normal(rng, (c.len_h, d), 0.1), requires_grad=True),
        )
        self.blocks = [PRWBlock(d, c.n_heads, rng) for _ in range(c.n_blocks)]
        self.readout = Tensor(_normal(rng, (d, c.x_features), 1 / np.sqrt(d)), requires_grad=True)

    @property
    def n_experts(self) -> int:
        return len(self.blocks[0].pool)

    def add_expert(self, rank: int, lora_alpha: float, rng: np.random.Generator) -> None:
        for b in self.blocks:
            b.add_expert(rank, lora_alpha, rng)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for n, t in self.embed.items():
            params[f"embed.{n}"] = t
        for n, t in self.pos.items():
            params[f"pos.{n}"] = t
        for i, b in enumerate(self.blocks):
            for n, t in b.parameters().items():
                params[f"blocks.{i}.{n}"] = t
        params["readout"] = self.readout
        return params

    def base_parameter_names(self) -> List[str]:
        return [n for n in self.named_parameters() if ".router." not in n and ".experts." not in n]

    def embed_streams(self, x_tokens, y_tokens, h_tokens, u) -> LatentTriple:
        c = self.config
        for name, arr, length, width in (("x", x_tokens, c.len_x, c.x_features),
                                          ("y", y_tokens, c.len_y, c.y_features),
                                          ("h", h_tokens, c.len_h, c.h_features)):
            if np.shape(arr)[1:] != (length, width):
                raise ad.ShapeError(f"{name} tokens: expected (B, {length}, {width}), got {np.shape(arr)}")
        t = ad.matmul(Tensor(time_features(u, c.time_features)), self.embed["t"])
        x = ad.add(ad.add(ad.matmul(_const(x_tokens), self.embed["x"]), self.pos["x"]), t)
        y = ad.add(ad.matmul(_const(y_tokens), self.embed["y"]), self.pos["y"])
        h = ad.add(ad.matmul(_const(h_tokens), self.embed["h"]), self.pos["h"])
        return LatentTriple(x, y, h)

    def forward(self, x_tokens, y_tokens, h_tokens, u, rng: Optional[np.random.Generator] = None,
                training: bool = True, forced: Optional[Sequence[np.ndarray]] = None,
                use_prw: bool = True):
        """Predict velocity tokens ``(B, len_x, x_features)``.

        Returns ``(prediction, decisions)`` with one routing decision per block.
        """
        triple = self.embed_streams(x_tokens, y_tokens, h_tokens, u)
        decisions = []
        for i, block in enumerate(self.blocks):
            triple, decision = block.forward(
                triple, rng, training=training,
                forced=None if forced is None else forced[i], use_prw=use_prw)
            decisions.append(decision)
        return ad.matmul(triple.x, self.readout), decisions


def _const(arr) -> Tensor:
    return arr if isinstance(arr, Tensor) else Tensor(arr)
