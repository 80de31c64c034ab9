"""Byte-level decoder-only LM: model assembly, training, evaluation, checkpoints,
and the five-variant comparison suite."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .bitnet import linear
from .layers import ExpertParams, MHMoEParams, MoEConfig, expert_forward, init_params, load_balance_loss, mhmoe_forward
from .parity import count_params, leading_ops_per_token, param_breakdown, solve_parity
from .tensor import OpCounter, Rng, Tensor

log = logging.getLogger(__name__)

VOCAB = 256
CHECKPOINT_FORMAT = "mhmoe-checkpoint"


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    d: int = 48
    n_heads_attn: int = 4
    context_len: int = 128
    d_ff: int = 128
    ffn_activation: str = "swiglu3mat"
    moe: MoEConfig | None = None
    bitnet: bool = False
    bitnet_mode: str = "ternary"
    seed: int = 0
    vocab: int = VOCAB

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = MoEConfig.from_dict(self.moe)
        if self.vocab != VOCAB:
            raise ConfigError("vocabulary is fixed to 256 bytes")
        if self.d % self.n_heads_attn:
            raise ConfigError(f"n_heads_attn={self.n_heads_attn} does not divide d={self.d}")
        if self.moe is not None and self.moe.d != self.d:
            raise ConfigError(f"MoE layer width {self.moe.d} differs from model width {self.d}")
        if min(self.n_layers, self.context_len, self.d_ff) < 1:
            raise ConfigError("n_layers, context_len and d_ff must be positive")

    @property
    def moe_blocks(self) -> list[int]:
        """Zero-based indices of MoE blocks: every second block, starting with the second."""
        if self.moe is None:
            return []
        return [i for i in range(self.n_layers) if i % 2 == 1]

    @property
    def quant(self) -> str | None:
        return self.bitnet_mode if self.bitnet else None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["moe"] = None if self.moe is None else self.moe.to_dict()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


def default_config(**changes) -> ModelConfig:
    """Desk-scale SMoE baseline: SwiGLU experts, top-1 of 8, MoE every second block."""
    base = dict(n_layers=4, d=48, n_heads_attn=4, context_len=128, d_ff=128,
                moe=MoEConfig(d=48, d_expert=128, E=8, k=1, activation="swiglu3mat"))
    base.update(changes)
    return ModelConfig(**base)


class Model:
    """Parameter container plus forward pass. ``params`` is ordered and named."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], moe: dict[int, MHMoEParams],
                 ffn: dict[int, ExpertParams]):
        self.cfg = cfg
        self.params = params
        self.moe = moe
        self.ffn = ffn
        mask = np.triu(np.full((cfg.context_len, cfg.context_len), -np.inf), k=1)
        self._mask = mask

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _attention(self, x: Tensor, i: int, B: int, L: int) -> Tensor:
        cfg = self.cfg
        d, nh = cfg.d, cfg.n_heads_attn
        hd = d // nh
        qkv = linear(x, self.params[f"blocks.{i}.attn.qkv"], None, cfg.quant)

        def heads(t):
            return T.rearrange(t, (B, L, nh, hd), (0, 2, 1, 3), (B * nh, L, hd))

        q, k, v = (heads(T.slice_cols(qkv, j * d, (j + 1) * d)) for j in range(3))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(hd))
        att = T.softmax_rows(T.add(scores, Tensor(self._mask[:L, :L])))
        out = T.rearrange(T.matmul(att, v), (B, nh, L, hd), (0, 2, 1, 3), (B * L, d))
        return linear(out, self.params[f"blocks.{i}.attn.out"], None, cfg.quant)

    def forward(self, ids: np.ndarray, counter: OpCounter | None = None):
        """Logits of shape (B*L, 256) for byte ids (B, L), plus routing decisions of MoE blocks.

        ``counter`` sees only the FFN / MoE blocks.
        """
        cfg = self.cfg
        ids = np.asarray(ids)
        B, L = ids.shape
        if L > cfg.context_len:
            raise ConfigError(f"sequence length {L} exceeds context {cfg.context_len}")
        x = T.add(T.take_rows(self.params["embed"], ids), T.take_rows(self.params["pos"], np.arange(L)))
        x = T.reshape(x, (B * L, cfg.d))
        routing = []
        for i in range(cfg.n_layers):
            x = T.add(x, self._attention(T.rms_norm(x, self.params[f"blocks.{i}.norm1"]), i, B, L))
            h = T.rms_norm(x, self.params[f"blocks.{i}.norm2"])
            if i in self.moe:
                y, decision = mhmoe_forward(h, self.moe[i], cfg.moe, counter, quant=cfg.quant,
                                            return_routing=True)
                routing.append(decision)
            else:
                y = expert_forward(h, self.ffn[i], cfg.ffn_activation, counter, cfg.quant)
            x = T.add(x, y)
        x = T.rms_norm(x, self.params["norm_f"])
        return T.matmul(x, self.params["head"]), routing

    def loss(self, inputs: np.ndarray, targets: np.ndarray, balance_coef: float = 0.0,
             counter: OpCounter | None = None):
        """Returns (total loss, cross-entropy, summed balance loss) as tensors."""
        logits, routing = self.forward(inputs, counter)
        ce = T.cross_entropy(logits, np.asarray(targets).reshape(-1))
        if not routing:
            return ce, ce, Tensor(0.0)
        bal = load_balance_loss(routing[0], self.cfg.moe.E)
        for decision in routing[1:]:
            bal = T.add(bal, load_balance_loss(decision, self.cfg.moe.E))
        total = T.add(ce, T.scale(bal, balance_coef)) if balance_coef else ce
        return total, ce, bal


def _param(rng: Rng, shape, std=0.02) -> Tensor:
    return Tensor(rng.truncated_normal(shape, std), requires_grad=True)


def build_model(cfg: ModelConfig) -> Model:
    """Embedding -> pre-norm blocks (attention, FFN or MoE) -> final norm -> byte logits."""
    root = Rng(cfg.seed).derive("init")
    params: dict[str, Tensor] = {
        "embed": _param(root.derive("embed"), (VOCAB, cfg.d)),
        "pos": _param(root.derive("pos"), (cfg.context_len, cfg.d)),
    }
    moe: dict[int, MHMoEParams] = {}
    ffn: dict[int, ExpertParams] = {}
    for i in range(cfg.n_layers):
        rng = root.derive(f"block{i}")
        params[f"blocks.{i}.norm1"] = Tensor(np.ones(cfg.d), requires_grad=True)
        params[f"blocks.{i}.attn.qkv"] = _param(rng, (cfg.d, 3 * cfg.d))
        params[f"blocks.{i}.attn.out"] = _param(rng, (cfg.d, cfg.d))
        params[f"blocks.{i}.norm2"] = Tensor(np.ones(cfg.d), requires_grad=True)
        if i in cfg.moe_blocks:
            moe[i] = init_params(cfg.moe, rng)
            for name, t in moe[i].named_tensors().items():
                params[f"blocks.{i}.moe.{name}"] = t
        else:
            W1 = _param(rng, (cfg.d, cfg.d_ff))
            W3 = _param(rng, (cfg.d, cfg.d_ff)) if cfg.ffn_activation == "swiglu3mat" else None
            ffn[i] = ExpertParams(W1, _param(rng, (cfg.d_ff, cfg.d)), W3)
            for name, t in ffn[i].tensors().items():
                params[f"blocks.{i}.ffn.{name}"] = t
    params["norm_f"] = Tensor(np.ones(cfg.d), requires_grad=True)
    params["head"] = _param(root.derive("head"), (cfg.d, VOCAB))
    return Model(cfg, params, moe, ffn)


def model_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter total of :func:`build_model`."""
    d = cfg.d
    m_ffn = 3 if cfg.ffn_activation == "swiglu3mat" else 2
    total = 2 * VOCAB * d + cfg.context_len * d + d
    for i in range(cfg.n_layers):
        total += 4 * d * d + 2 * d
        total += count_params(cfg.moe) if i in cfg.moe_blocks else m_ffn * d * cfg.d_ff
    return total


# ---------------------------------------------------------------------------
# data


def load_corpus(path: str | os.PathLike) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)


def bundled_corpus() -> np.ndarray:
    """The ~64KB English text shipped with the package."""
    return load_corpus(Path(__file__).parent / "data" / "corpus.txt")


def as_bytes(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return corpus.astype(np.uint8, copy=False)
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    return np.frombuffer(bytes(corpus), dtype=np.uint8)


def split_corpus(corpus, val_frac: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous, disjoint train / validation split (validation is the tail)."""
    data = as_bytes(corpus)
    cut = int(len(data) * (1.0 - val_frac))
    return data[:cut], data[cut:]


def sample_batch(data: np.ndarray, rng: Rng, batch_size: int, context_len: int):
    n = len(data) - context_len - 1
    if n < 1:
        raise ConfigError(f"corpus of {len(data)} bytes is shorter than context {context_len} + 1")
    starts = rng.integers(0, n + 1, size=batch_size)
    idx = starts[:, None] + np.arange(context_len + 1)[None, :]
    window = data[idx].astype(np.int64)
    return window[:, :-1], window[:, 1:]


def eval_windows(data: np.ndarray, context_len: int) -> list[np.ndarray]:
    """Non-overlapping windows of up to context_len + 1 bytes covering the corpus."""
    data = as_bytes(data).astype(np.int64)
    out = []
    for start in range(0, len(data) - 1, context_len):
        w = data[start:start + context_len + 1]
        if len(w) >= 2:
            out.append(w)
    return out


# ---------------------------------------------------------------------------
# evaluation


def mean_nll(model: Model, corpus, batch_size: int = 16) -> float:
    """Mean next-byte cross-entropy (nats) over every predicted position."""
    windows = eval_windows(corpus, model.cfg.context_len)
    if not windows:
        raise ConfigError("evaluation corpus needs at least two bytes")
    total, count = 0.0, 0
    with T.no_grad():
        by_len: dict[int, list[np.ndarray]] = {}
        for w in windows:
            by_len.setdefault(len(w), []).append(w)
        for length in sorted(by_len):
            group = by_len[length]
            for i in range(0, len(group), batch_size):
                chunk = np.stack(group[i:i + batch_size])
                logits, _ = model.forward(chunk[:, :-1])
                n = chunk[:, 1:].size
                total += T.cross_entropy(logits, chunk[:, 1:].reshape(-1)).item() * n
                count += n
    return total / count


def evaluate_perplexity(model: Model, corpus, batch_size: int = 16) -> float:
    return math.exp(mean_nll(model, corpus, batch_size))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    lr: float = 3e-3
    total_steps: int = 500
    batch_size: int = 8
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    balance_coef: float = 0.01
    grad_clip: float = 1.0

    def lr_at(self, step: int) -> float:
        """Learning rate for update number ``step`` (1-based): linear warmup, cosine decay."""
        warm = max(1, round(self.warmup_frac * self.total_steps))
        if step <= warm:
            return self.lr * step / warm
        progress = min(1.0, (step - warm) / max(1, self.total_steps - warm))
        floor = self.final_lr_frac
        return self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))

    @classmethod
    def from_dict(cls, doc: dict) -> TrainHyper:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainState:
    model: Model
    rng: Rng
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)


def silent_parameters(model: Model) -> list[str]:
    """Names of parameters whose gradient after the last backward is missing or all zero.

    Under top-k routing an expert that received no rows is expected here.
    """
    return [n for n, p in model.params.items() if p.grad is None or not np.any(p.grad)]


def init_train_state(cfg: ModelConfig) -> TrainState:
    model = build_model(cfg)
    state = TrainState(model, Rng(cfg.seed).derive("batches"))
    for name, p in model.params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def train(state: TrainState, corpus, steps: int, hyper: TrainHyper | None = None,
          metrics_path: str | os.PathLike | None = None) -> TrainState:
    """Run ``steps`` Adam updates in place and return the state.

    Batches come from the state's RNG, so a resumed run replays exactly.
    Each step appends one JSON line to ``metrics_path`` when given.
    """
    hyper = hyper or TrainHyper()
    data = as_bytes(corpus)
    if len(data) == 0:
        raise ConfigError("training corpus is empty")
    model = state.model
    cfg = model.cfg
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            inputs, targets = sample_batch(data, state.rng, hyper.batch_size, cfg.context_len)
            counter = OpCounter()
            model.zero_grad()
            total, ce, bal = model.loss(inputs, targets, hyper.balance_coef, counter)
            T.backward(total)
            grads = {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in model.params.items()}
            gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            step = state.step + 1
            lr = hyper.lr_at(step)
            loss = total.item()
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise TrainingDivergedError(f"non-finite loss at step {step}: loss={loss}, lr={lr}, "
                                            f"grad_norm={gnorm}")
            if step == 1:
                dead = silent_parameters(model)
                if dead:
                    log.warning("step %d: no gradient reached %s", step, ", ".join(dead))
            clip = min(1.0, hyper.grad_clip / (gnorm + 1e-12)) if hyper.grad_clip else 1.0
            b1, b2 = hyper.beta1, hyper.beta2
            for name, p in model.params.items():
                g = grads[name] * clip
                state.m[name] = b1 * state.m[name] + (1 - b1) * g
                state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
                mhat = state.m[name] / (1 - b1**step)
                vhat = state.v[name] / (1 - b2**step)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + hyper.eps)
            state.step = step
            state.losses.append(loss)
            if sink:
                sink.write(json.dumps({
                    "step": step, "loss": loss, "ppl": math.exp(ce.item()), "balance_loss": bal.item(),
                    "ops_per_token": counter.paper_count / inputs.size,
                }) + "\n")
    finally:
        if sink:
            sink.close()
    model.zero_grad()
    return state


# ---------------------------------------------------------------------------
# checkpoints: <dir>/header.json + <dir>/tensors.bin (little-endian float64, concatenated)


def save_checkpoint(state: TrainState, path: str | os.PathLike, hyper: TrainHyper | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "tensors.bin", "wb") as fh:
        for group, source in (("param", {n: p.data for n, p in state.model.params.items()}),
                              ("adam_m", state.m), ("adam_v", state.v)):
            for name, arr in source.items():
                raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                entries.append({"group": group, "name": name, "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(raw)})
                fh.write(raw)
                offset += len(raw)
    header = {
        "format": CHECKPOINT_FORMAT, "version": 1, "dtype": "<f8",
        "config": state.model.cfg.to_dict(), "hyper": None if hyper is None else asdict(hyper),
        "step": state.step, "seed": state.model.cfg.seed, "rng": state.rng.get_state(),
        "losses": state.losses, "tensors": entries,
    }
    (path / "header.json").write_text(json.dumps(header, indent=1))
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[TrainState, TrainHyper | None]:
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint directory")
    cfg = ModelConfig.from_dict(header["config"])
    state = init_train_state(cfg)
    blob = (path / "tensors.bin").read_bytes()
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(np.float64)
        if e["group"] == "param":
            state.model.params[e["name"]].data = arr
        elif e["group"] == "adam_m":
            state.m[e["name"]] = arr
        else:
            state.v[e["name"]] = arr
    state.step = header["step"]
    state.rng.set_state(header["rng"])
    state.losses = list(header["losses"])
    hyper = None if header["hyper"] is None else TrainHyper.from_dict(header["hyper"])
    return state, hyper


# ---------------------------------------------------------------------------
# variant suite

VARIANTS = ("Dense", "SMoE", "Fine-grained SMoE", "MH-MoE (head=2)", "MH-MoE (head=3)")


class ParityError(ConfigError):
    pass


def variant_configs(base: ModelConfig, *, shared_expert: bool = False, bitnet: bool = False
                    ) -> dict[str, ModelConfig]:
    """Derive the compared models from an SMoE baseline.

    Dense uses a single FFN of the baseline's activated width and is left out
    when every MoE variant carries a shared expert.  Fine-grained
    halves the expert width, doubles the experts and the top-k.  MH-MoE
    variants use h heads with top-h routing, sized by :func:`solve_parity`.
    """
    smoe = base.moe
    if smoe is None or not smoe.is_smoe:
        raise ConfigError("the suite baseline must carry a plain SMoE layer config")
    if smoe.d_expert % 2:
        raise ConfigError("fine-grained variant needs an even expert width")
    shared = smoe.d_expert if shared_expert else None
    moes = {
        "SMoE": smoe,
        "Fine-grained SMoE": smoe.with_(d_expert=smoe.d_expert // 2, E=2 * smoe.E, k=min(2 * smoe.k, 2 * smoe.E)),
        "MH-MoE (head=2)": solve_parity(smoe, 2, 2).planned,
        "MH-MoE (head=3)": solve_parity(smoe, 3, 3).planned,
    }
    out = {}
    if not shared_expert:
        out["Dense"] = ModelConfig(**{**_shallow(base), "moe": None, "d_ff": smoe.d_expert * smoe.k,
                                      "bitnet": bitnet})
    for name, m in moes.items():
        out[name] = ModelConfig(**{**_shallow(base), "moe": m.with_(shared_expert_dim=shared), "bitnet": bitnet})
    return out


def _shallow(cfg: ModelConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def parity_precheck(variants: dict[str, ModelConfig], reference: str = "SMoE", param_tol: float = 0.05) -> dict:
    """Leading-order per-token MoE ops must agree exactly; MoE-block parameters within ``param_tol``."""
    ref = variants[reference].moe
    ref_ops, ref_params = leading_ops_per_token(ref), count_params(ref)
    report = {}
    for name, cfg in variants.items():
        if cfg.moe is None:
            report[name] = {"leading_ops_per_token": leading_ops_per_token(MoEConfig(
                d=cfg.d, d_expert=cfg.d_ff, activation=cfg.ffn_activation)), "moe_params": None}
            continue
        ops, params = leading_ops_per_token(cfg.moe), count_params(cfg.moe)
        if ops != ref_ops:
            raise ParityError(f"{name}: leading per-token ops {ops} differ from {reference} "
                              f"({ref_ops}); residual {ops - ref_ops}")
        rel = params / ref_params - 1.0
        if abs(rel) > param_tol:
            raise ParityError(f"{name}: MoE parameters {params} vs {ref_params} ({reference}); "
                              f"residual {params - ref_params} ({rel:+.2%}) exceeds {param_tol:.0%}")
        report[name] = {"leading_ops_per_token": ops, "moe_params": params,
                        "param_breakdown": param_breakdown(cfg.moe)}
    return report


@dataclass
class SuiteResult:
    rows: list[dict]
    corpora: list[str]
    precheck: dict

    def to_markdown(self) -> str:
        head = "| Model | " + " | ".join(self.corpora) + " |"
        lines = [head, "|---|" + "---:|" * len(self.corpora)]
        for row in self.rows:
            lines.append(f"| {row['model']} | " + " | ".join(f"{row['ppl'][c]:.2f}" for c in self.corpora) + " |")
        return "\n".join(lines)


def run_variant_suite(base: ModelConfig, corpus, steps: int, hyper: TrainHyper | None = None, *,
                      eval_corpora: dict | None = None, shared_expert: bool = False, bitnet: bool = False,
                      variants: dict[str, ModelConfig] | None = None) -> SuiteResult:
    """Train every variant from the same seed and tabulate validation perplexity.

    ``corpus`` is split into train/validation; ``eval_corpora`` adds columns.
    Parity is checked before any training starts.
    """
    hyper = hyper or TrainHyper(total_steps=steps)
    variants = variants or variant_configs(base, shared_expert=shared_expert, bitnet=bitnet)
    precheck = parity_precheck(variants)
    train_data, val_data = split_corpus(corpus)
    columns = {"validation": val_data, **{k: as_bytes(v) for k, v in (eval_corpora or {}).items()}}
    rows = []
    for name, cfg in variants.items():
        state = init_train_state(cfg)
        initial = mean_nll(state.model, val_data)
        train(state, train_data, steps, hyper)
        final = mean_nll(state.model, val_data)
        ppl = {c: (math.exp(final) if c == "validation" else evaluate_perplexity(state.model, data))
               for c, data in columns.items()}
        log.info("%s: val loss %.4f -> %.4f", name, initial, final)
        rows.append({"model": name, "ppl": ppl, "initial_val_loss": initial, "final_val_loss": final,
                     "params": state.model.n_params(), "config": cfg.to_dict()})
    return SuiteResult(rows, list(columns), precheck)
