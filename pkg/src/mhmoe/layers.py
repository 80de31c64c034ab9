"""Expert FFNs, top-k routing, and the SMoE / MH-MoE layer.

A plain SMoE layer is the ``h=1`` case with both projections switched off.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .bitnet import linear
from .tensor import OpCounter, Rng, Tensor

ACTIVATIONS = ("relu2mat", "swiglu3mat")
INIT_STD = 0.02


@dataclass(frozen=True)
class MoEConfig:
    d: int
    h: int = 1
    d_expert: int = 4
    E: int = 1
    k: int = 1
    activation: str = "relu2mat"
    use_head_layer: bool = False
    use_merge_layer: bool = False
    shared_expert_dim: int | None = None

    def __post_init__(self):
        for name in ("d", "h", "d_expert", "E", "k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.d % self.h:
            raise T.DimensionError(f"head count h={self.h} does not divide d={self.d}")
        if self.k > self.E:
            raise ValueError(f"k={self.k} exceeds expert count E={self.E}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.shared_expert_dim is not None and self.shared_expert_dim < 1:
            raise ValueError("shared_expert_dim must be positive when set")

    @property
    def sub_dim(self) -> int:
        return self.d // self.h

    @property
    def is_smoe(self) -> bool:
        return self.h == 1 and not self.use_head_layer and not self.use_merge_layer

    def with_(self, **changes) -> MoEConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, doc: dict) -> MoEConfig:
        return cls(**doc)


@dataclass
class ExpertParams:
    W1: Tensor
    W2: Tensor
    W3: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"W1": self.W1, "W2": self.W2}
        if self.W3 is not None:
            out["W3"] = self.W3
        return out


@dataclass
class MHMoEParams:
    gate: Tensor
    experts: list[ExpertParams]
    W_head: Tensor | None = None
    W_merge: Tensor | None = None
    shared: ExpertParams | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"gate": self.gate}
        if self.W_head is not None:
            out["W_head"] = self.W_head
        if self.W_merge is not None:
            out["W_merge"] = self.W_merge
        for i, ex in enumerate(self.experts):
            for name, t in ex.tensors().items():
                out[f"experts.{i}.{name}"] = t
        if self.shared is not None:
            for name, t in self.shared.tensors().items():
                out[f"shared.{name}"] = t
        return out


@dataclass
class RoutingDecision:
    """Selected experts per row plus differentiable gate values.

    ``weights`` are the renormalized top-k probabilities; ``probs`` is the full
    softmax over all experts (kept for the balance loss).
    """

    indices: np.ndarray
    weights: Tensor
    probs: Tensor = field(repr=False)


def _expert_init(rng: Rng, n_in: int, n_hidden: int, activation: str, std: float) -> ExpertParams:
    W1 = Tensor(rng.truncated_normal((n_in, n_hidden), std), requires_grad=True)
    W3 = None
    if activation == "swiglu3mat":
        W3 = Tensor(rng.truncated_normal((n_in, n_hidden), std), requires_grad=True)
    W2 = Tensor(rng.truncated_normal((n_hidden, n_in), std), requires_grad=True)
    return ExpertParams(W1, W2, W3)


def init_params(cfg: MoEConfig, rng: Rng, std: float = INIT_STD) -> MHMoEParams:
    """Truncated-normal (default std 0.02, cut at 2 sigma) draws in a fixed order."""

    def draw(shape):
        return Tensor(rng.truncated_normal(shape, std), requires_grad=True)

    W_head = draw((cfg.d, cfg.d)) if cfg.use_head_layer else None
    gate = draw((cfg.sub_dim, cfg.E))
    experts = [_expert_init(rng, cfg.sub_dim, cfg.d_expert, cfg.activation, std) for _ in range(cfg.E)]
    W_merge = draw((cfg.d, cfg.d)) if cfg.use_merge_layer else None
    shared = None
    if cfg.shared_expert_dim is not None:
        shared = _expert_init(rng, cfg.d, cfg.shared_expert_dim, cfg.activation, std)
    return MHMoEParams(gate, experts, W_head, W_merge, shared)


def expert_forward(x: Tensor, p: ExpertParams, activation: str,
                   counter: OpCounter | None = None, quant: str | None = None) -> Tensor:
    if activation == "relu2mat":
        hidden = T.relu(linear(x, p.W1, counter, quant))
    elif activation == "swiglu3mat":
        if p.W3 is None:
            raise ValueError("swiglu3mat expert needs W3")
        hidden = T.hadamard(T.silu(linear(x, p.W1, counter, quant)), linear(x, p.W3, counter, quant),
                            counter)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return linear(hidden, p.W2, counter, quant)


def route_topk(x_sub: Tensor, gate: Tensor, k: int, quant: str | None = None) -> RoutingDecision:
    """Softmax over all experts, keep the k largest per row, renormalize them.

    Ties go to the lower expert index.  The gate product is not counted.
    """
    E = gate.shape[1]
    if not 1 <= k <= E:
        raise ValueError(f"k={k} must lie in [1, {E}]")
    probs = T.softmax_rows(linear(x_sub, gate, None, quant))
    indices = np.argsort(-probs.data, axis=1, kind="stable")[:, :k]
    weights = T.normalize_rows(T.take_along_rows(probs, indices))
    return RoutingDecision(indices, weights, probs)


def moe_forward(x_sub: Tensor, params: MHMoEParams, cfg: MoEConfig, counter: OpCounter | None = None,
                *, quant: str | None = None, return_routing: bool = False):
    """Weighted sum of the k selected experts per row; unselected experts never run."""
    decision = route_topk(x_sub, params.gate, cfg.k, quant)
    rows_total = x_sub.shape[0]
    parts = []
    for e, ex in enumerate(params.experts):
        rows, slots = np.nonzero(decision.indices == e)
        if rows.size == 0:
            continue
        out = expert_forward(T.take_rows(x_sub, rows), ex, cfg.activation, counter, quant)
        parts.append((rows, T.scale_rows(out, T.take_elements(decision.weights, rows, slots))))
    y = T.scatter_add_rows(rows_total, parts)
    return (y, decision) if return_routing else y


def mhmoe_forward(x: Tensor, params: MHMoEParams, cfg: MoEConfig, counter: OpCounter | None = None,
                  *, quant: str | None = None, return_routing: bool = False):
    """Head projection, sub-token split, routed experts, merge, merge projection.

    A disabled projection is skipped entirely (no parameters, no counted ops).
    The shared expert, if configured, runs on the unsplit input and is added to
    the routed output.
    """
    if x.ndim != 2 or x.shape[1] != cfg.d:
        raise T.DimensionError(f"expected input of shape (B, {cfg.d}), got {x.shape}")
    hx = linear(x, params.W_head, counter, quant) if cfg.use_head_layer else x
    y_sub, decision = moe_forward(T.split_last_dim(hx, cfg.h), params, cfg, counter,
                                  quant=quant, return_routing=True)
    y = T.merge_last_dim(y_sub, cfg.h)
    if cfg.use_merge_layer:
        y = linear(y, params.W_merge, counter, quant)
    if params.shared is not None:
        y = T.add(y, expert_forward(x, params.shared, cfg.activation, counter, quant))
    return (y, decision) if return_routing else y


def load_balance_loss(decision: RoutingDecision, E: int) -> Tensor:
    """``E * sum_e fraction_routed(e) * mean_prob(e)``; 1.0 under uniform routing.

    ``fraction_routed`` counts (row, slot) assignments, so it sums to 1 for any k.
    """
    counts = np.bincount(decision.indices.reshape(-1), minlength=E).astype(np.float64)
    frac = Tensor(counts / decision.indices.size)
    return T.scale(T.sum_all(T.hadamard(T.mean_rows(decision.probs), frac)), float(E))


def layer_gradcheck(cfg: MoEConfig, seed: int, B: int = 3, step: float = 1e-5,
                    balance_coef: float = 0.1) -> dict[str, float]:
    """Finite-difference check of every parameter matrix and the input of one layer.

    The scalar loss is ``sum(y * R) + balance_coef * balance_loss`` for a fixed
    random ``R``.  Inputs are redrawn until every ReLU input and every top-k
    routing margin sits at least 1e-3 away from its kink.
    """
    rng = Rng(seed)
    params = init_params(cfg, rng, std=0.5)
    for _ in range(100):
        x = Tensor(rng.normal((B, cfg.d)))
        if _kink_distance(x.data, params, cfg) > 1e-3:
            break
    probe = Tensor(rng.normal((B, cfg.d)))

    def loss(_):
        y, decision = mhmoe_forward(x, params, cfg, return_routing=True)
        out = T.sum_all(T.hadamard(y, probe))
        return T.add(out, T.scale(load_balance_loss(decision, cfg.E), balance_coef))

    targets = {"x": x, **params.named_tensors()}
    return {name: T.finite_difference_check(loss, t, step) for name, t in targets.items()}


def _kink_distance(x: np.ndarray, params: MHMoEParams, cfg: MoEConfig) -> float:
    hx = x @ params.W_head.data if cfg.use_head_layer else x
    sub = hx.reshape(-1, cfg.sub_dim)
    z = sub @ params.gate.data
    dist = np.inf
    if cfg.k < cfg.E:
        top = np.sort(z, axis=1)[:, ::-1]
        dist = float((top[:, cfg.k - 1] - top[:, cfg.k]).min())
    if cfg.activation == "relu2mat":
        pre = [sub @ ex.W1.data for ex in params.experts]
        if params.shared is not None:
            pre.append(x @ params.shared.W1.data)
        dist = min(dist, min(float(np.abs(p).min()) for p in pre))
    return dist
