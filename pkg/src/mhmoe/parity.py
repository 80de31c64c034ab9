"""Exact operation/parameter accounting and the SMoE -> MH-MoE parity solver.

Counts follow the multiplies-plus-adds convention of :class:`mhmoe.tensor.OpCounter`:
an (r x n) @ (n x p) product costs ``r*p*(2n - 1)``; a SwiGLU gate adds one
multiply per hidden unit; routing, softmax and nonlinearities are free.

All count functions accept :class:`fractions.Fraction` dimensions so that
un-rounded solver outputs can be evaluated exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

from .layers import MoEConfig

Number = Union[int, Fraction]

# Leading coefficient per (token * d * d_expert * k) of expert ops, and matrices per expert.
OPS_COEF = {"relu2mat": 4, "swiglu3mat": 6}
MATS = {"relu2mat": 2, "swiglu3mat": 3}


class InfeasiblePlanError(ValueError):
    pass


def _exact(x) -> Number:
    x = Fraction(x)
    return int(x) if x.denominator == 1 else x


def _fmt(x) -> str:
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def poly_str(quadratic, linear) -> str:
    """Render ``a*B*d^2 + b*B*d`` as text, e.g. ``16Bd^2 - 5Bd``."""
    lin = Fraction(linear)
    sign = "-" if lin < 0 else "+"
    return f"{_fmt(quadratic)}Bd^2 {sign} {_fmt(abs(lin))}Bd"


def _check_activation(activation: str) -> None:
    if activation not in OPS_COEF:
        raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class CostReport:
    head_ops: Number
    expert_ops: Number
    merge_ops: Number
    shared_ops: Number = 0
    param_count: Number | None = None

    @property
    def total_ops(self) -> Number:
        return _exact(self.head_ops + self.expert_ops + self.merge_ops + self.shared_ops)

    def to_dict(self) -> dict:
        out = {
            "head_ops": self.head_ops, "expert_ops": self.expert_ops, "merge_ops": self.merge_ops,
            "shared_ops": self.shared_ops, "total_ops": self.total_ops, "param_count": self.param_count,
        }
        return {k: (v if v is None or isinstance(v, int) else _fmt(v)) for k, v in out.items()}


def _ffn_ops(rows: Number, n_in: Number, n_hidden: Number, activation: str) -> Number:
    # relu:   rows*(4*n_in*n_hidden - n_hidden - n_in)
    # swiglu: rows*(6*n_in*n_hidden - n_hidden - n_in)  (two input products, gate multiply, output product)
    return rows * (OPS_COEF[activation] * n_in * n_hidden - n_hidden - n_in)


def count_smoe_ops(B: Number, d: Number, d_expert: Number, k: int, activation: str = "relu2mat",
                   E: int | None = None) -> CostReport:
    """Per-batch ops of a plain SMoE layer: ``(4*B*d*d_e - B*d_e - B*d) * k`` for ReLU experts."""
    _check_activation(activation)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    expert = _exact(_ffn_ops(B * k, d, d_expert, activation))
    params = None if E is None else _exact(MATS[activation] * d * d_expert * E + d * E)
    return CostReport(0, expert, 0, 0, params)


def count_mhmoe_ops(B: Number, d: Number, h: int, d_expert: Number, k: int,
                    activation: str = "relu2mat", use_head: bool = True, use_merge: bool = True,
                    shared_expert_dim: Number | None = None, E: int | None = None) -> CostReport:
    """Per-batch ops of an MH-MoE layer.

    Each enabled d x d projection costs ``2*B*d^2 - B*d``; the B*h sub-tokens
    each visit k experts of input width d/h, giving
    ``(4*B*d*d_e - B*d - B*d_e*h) * k`` for ReLU experts.
    """
    _check_activation(activation)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(d, int) and d % h:
        raise ValueError(f"head count h={h} does not divide d={d}")
    proj = _exact(2 * B * d * d - B * d)
    expert = _exact(_ffn_ops(B * h * k, Fraction(d) / h, d_expert, activation))
    shared = 0 if shared_expert_dim is None else _exact(_ffn_ops(B, d, shared_expert_dim, activation))
    params = None
    if E is not None:
        params = _exact(MATS[activation] * Fraction(d, 1) / h * d_expert * E + Fraction(d) / h * E
                        + (use_head + use_merge) * d * d
                        + (0 if shared_expert_dim is None else MATS[activation] * d * shared_expert_dim))
    return CostReport(proj if use_head else 0, expert, proj if use_merge else 0, shared, params)


def cost_report(cfg: MoEConfig, B: int) -> CostReport:
    """Analytic report for a concrete layer configuration at batch size ``B``."""
    return count_mhmoe_ops(B, cfg.d, cfg.h, cfg.d_expert, cfg.k, cfg.activation,
                           cfg.use_head_layer, cfg.use_merge_layer, cfg.shared_expert_dim, cfg.E)


def param_breakdown(cfg: MoEConfig) -> dict[str, int]:
    m = MATS[cfg.activation]
    parts = {
        "experts": m * cfg.sub_dim * cfg.d_expert * cfg.E,
        "head": cfg.d * cfg.d if cfg.use_head_layer else 0,
        "merge": cfg.d * cfg.d if cfg.use_merge_layer else 0,
        "gate": cfg.sub_dim * cfg.E,
        "shared": m * cfg.d * cfg.shared_expert_dim if cfg.shared_expert_dim else 0,
    }
    parts["total"] = sum(parts.values())
    return parts


def count_params(cfg: MoEConfig) -> int:
    return param_breakdown(cfg)["total"]


def bd_coefficients(total_for_d) -> tuple[Fraction, Fraction]:
    """Split an op count of the form ``B*(a*d^2 + b*d)`` into ``(a, b)``.

    ``total_for_d`` maps a (possibly fractional) d to the B=1 count.
    """
    f1 = Fraction(total_for_d(Fraction(1)))
    f2 = Fraction(total_for_d(Fraction(2)))
    a = (f2 - 2 * f1) / 2
    return a, f1 - a


# ---------------------------------------------------------------------------
# earlier MH-MoE sizing (inner dimension scaled by beta)


@dataclass(frozen=True)
class LegacyMHMoESpec:
    h: int
    beta: Fraction

    def __post_init__(self):
        if Fraction(self.beta) <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class LegacyComparison:
    """Both readings of the beta-scaled sizing.

    ``scaled_by_heads`` uses ``d_expert = 4*beta*h*d``; ``unscaled`` uses
    ``d_expert = 4*beta*d``.  Coefficient pairs are ``(Bd^2, Bd)`` terms.
    """

    scaled_by_heads: CostReport
    unscaled: CostReport
    scaled_by_heads_coefficients: tuple[Fraction, Fraction]
    unscaled_coefficients: tuple[Fraction, Fraction]

    def to_dict(self) -> dict:
        return {
            "d_expert_4_beta_h_d": {**self.scaled_by_heads.to_dict(),
                                    "Bd2": _fmt(self.scaled_by_heads_coefficients[0]),
                                    "Bd": _fmt(self.scaled_by_heads_coefficients[1])},
            "d_expert_4_beta_d": {**self.unscaled.to_dict(),
                                  "Bd2": _fmt(self.unscaled_coefficients[0]),
                                  "Bd": _fmt(self.unscaled_coefficients[1])},
        }


def count_legacy_mhmoe_ops(B: Number, d: Number, spec: LegacyMHMoESpec, k: int = 1,
                           activation: str = "relu2mat") -> LegacyComparison:
    beta = Fraction(spec.beta)
    h = spec.h

    def with_ratio(ratio):
        report = count_mhmoe_ops(B, Fraction(d), h, ratio * d, k, activation)
        coeffs = bd_coefficients(lambda dd: count_mhmoe_ops(1, dd, h, ratio * dd, k, activation).total_ops)
        return report, coeffs

    a, ca = with_ratio(4 * beta * h)
    b, cb = with_ratio(4 * beta)
    return LegacyComparison(a, b, ca, cb)


# ---------------------------------------------------------------------------
# parity solver


@dataclass(frozen=True)
class ParityPlan:
    baseline: MoEConfig
    planned: MoEConfig
    d_expert_exact: Fraction
    E_exact: Fraction
    flop_residual: int
    param_residual: int
    rounding: str = "nearest"

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.to_dict(),
            "planned": self.planned.to_dict(),
            "d_expert_exact": _fmt(self.d_expert_exact),
            "E_exact": _fmt(self.E_exact),
            "flop_residual": self.flop_residual,
            "param_residual": self.param_residual,
            "rounding": self.rounding,
            "reference_batch": 1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_markdown(self) -> str:
        b, p = self.baseline, self.planned
        rows = [
            ("h", b.h, p.h), ("k", b.k, p.k), ("d_expert", b.d_expert, p.d_expert),
            ("d_expert (exact)", b.d_expert, _fmt(self.d_expert_exact)),
            ("E", b.E, p.E), ("E (exact)", b.E, _fmt(self.E_exact)),
            ("ops @ B=1", cost_report(b, 1).total_ops, cost_report(p, 1).total_ops),
            ("params", count_params(b), count_params(p)),
        ]
        lines = ["| quantity | baseline | planned |", "|---|---:|---:|"]
        lines += [f"| {name} | {x} | {y} |" for name, x, y in rows]
        lines.append(f"\nflop residual: {self.flop_residual}, param residual: {self.param_residual}")
        return "\n".join(lines)


def _round(x: Fraction, policy: str) -> int:
    if policy == "floor":
        return math.floor(x)
    if policy == "nearest":
        return math.floor(x + Fraction(1, 2))
    raise ValueError(f"unknown rounding policy {policy!r}")


def solve_parity(baseline: MoEConfig, h: int, k: int, rounding: str = "nearest", *,
                 use_head_layer: bool = True, use_merge_layer: bool = True) -> ParityPlan:
    """Size an MH-MoE layer to match ``baseline`` in leading-order ops and in parameters.

    Ops:    c * d_base * k_base            = 2*n_proj*d + c * d_mh * k
    Params: m * d * d_base * E_base        = n_proj*d^2 + m * (d/h) * d_mh * E_mh
    with (c, m) = (4, 2) for ReLU experts and (6, 3) for SwiGLU experts, and
    n_proj the number of enabled d x d projections.  Gate and shared-expert
    parameters are left out of the balance.
    """
    if not baseline.is_smoe:
        raise ValueError("baseline must be a plain SMoE configuration (h=1, no projections)")
    d = baseline.d
    if d % h:
        raise ValueError(f"head count h={h} does not divide d={d}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    c, m = OPS_COEF[baseline.activation], MATS[baseline.activation]
    n_proj = int(use_head_layer) + int(use_merge_layer)

    d_exact = Fraction(c * baseline.d_expert * baseline.k - 2 * n_proj * d, c * k)
    if d_exact <= 0:
        raise InfeasiblePlanError(
            f"projection overhead exceeds the expert budget: d_expert would be {_fmt(d_exact)}")
    budget = m * d * baseline.d_expert * baseline.E - n_proj * d * d
    E_exact = Fraction(budget * h, m * d) / d_exact
    if E_exact <= 0:
        raise InfeasiblePlanError(f"projection parameters exceed the expert budget: E would be {_fmt(E_exact)}")

    d_mh, E_mh = _round(d_exact, rounding), _round(E_exact, rounding)
    if d_mh < 1 or E_mh < 1:
        raise InfeasiblePlanError(f"rounded plan is empty (d_expert={d_mh}, E={E_mh})")
    if E_mh < k:
        raise InfeasiblePlanError(f"planned E={E_mh} is smaller than k={k}")
    planned = baseline.with_(h=h, k=k, d_expert=d_mh, E=E_mh,
                             use_head_layer=use_head_layer, use_merge_layer=use_merge_layer)
    flop_res = cost_report(planned, 1).total_ops - cost_report(baseline, 1).total_ops
    p_base, p_plan = param_breakdown(baseline), param_breakdown(planned)
    param_res = (p_plan["experts"] + p_plan["head"] + p_plan["merge"]) - p_base["experts"]
    return ParityPlan(baseline, planned, d_exact, E_exact, int(flop_res), int(param_res), rounding)


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class ClaimedForm:
    """A quoted closed form ``a*B*d^2 + b*B*d`` for a configuration family."""

    h: int
    expert_ratio: Fraction
    k: int
    quadratic: Fraction
    linear: Fraction
    activation: str = "relu2mat"
    label: str = ""


CLAIMED_FORMS = (
    ClaimedForm(1, Fraction(4), 1, Fraction(16), Fraction(-5), label="SMoE, d_expert=4d, top-1"),
    ClaimedForm(2, Fraction(3), 1, Fraction(16), Fraction(-6), label="MH-MoE h=2, d_expert=3d, top-1"),
    ClaimedForm(2, Fraction(3, 2), 2, Fraction(16), Fraction(-5),
                label="MH-MoE h=2, d_expert=3d/2, top-2 (claimed equal to the top-1 SMoE count)"),
)


def _solve_exact(rows: list[list[Fraction]], rhs: list[Fraction]) -> list[Fraction]:
    n = len(rhs)
    a = [list(r) + [v] for r, v in zip(rows, rhs)]
    for col in range(n):
        piv = next(i for i in range(col, n) if a[i][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        for i in range(n):
            if i != col and a[i][col] != 0:
                f = a[i][col] / a[col][col]
                a[i] = [x - f * y for x, y in zip(a[i], a[col])]
    return [a[i][n] / a[i][i] for i in range(n)]


def fit_quadratic(ds: list[int], values: list[Fraction]) -> tuple[tuple[Fraction, Fraction, Fraction], bool]:
    """Exact fit of ``a*d^2 + b*d + c`` through the points; returns coefficients and
    whether every point lies on the curve.  With two points, ``c`` is pinned to 0."""
    pts = sorted(set(zip(ds, values)))
    xs = [Fraction(x) for x, _ in pts]
    ys = [Fraction(y) for _, y in pts]
    if len(set(xs)) != len(xs):
        raise ValueError("conflicting values for the same d")
    if len(xs) >= 3:
        a, b, c = _solve_exact([[x * x, x, Fraction(1)] for x in xs[:3]], ys[:3])
    elif len(xs) == 2:
        (a, b), c = _solve_exact([[x * x, x] for x in xs], ys), Fraction(0)
    else:
        raise ValueError("need at least two distinct d values")
    exact = all(a * x * x + b * x + c == y for x, y in zip(xs, ys))
    return (a, b, c), exact


@dataclass
class ParityVerification:
    points: list[dict]
    residual_fits: dict[int, dict]
    baseline_form: tuple[Fraction, Fraction]
    planned_form: tuple[Fraction, Fraction]
    quadratic_zero: bool
    discrepancies: list[str] = field(default_factory=list)

    @property
    def linear_residual(self) -> Fraction:
        """Residual Bd coefficient (planned minus baseline)."""
        return self.planned_form[1] - self.baseline_form[1]

    @property
    def ok(self) -> bool:
        return self.quadratic_zero

    def to_dict(self) -> dict:
        return {
            "quadratic_zero": self.quadratic_zero,
            "baseline_per_Bd": {"Bd2": _fmt(self.baseline_form[0]), "Bd": _fmt(self.baseline_form[1])},
            "planned_per_Bd": {"Bd2": _fmt(self.planned_form[0]), "Bd": _fmt(self.planned_form[1])},
            "linear_residual_Bd": _fmt(self.linear_residual),
            "residual_fits": {str(B): {k: (_fmt(v) if isinstance(v, Fraction) else v) for k, v in fit.items()}
                              for B, fit in self.residual_fits.items()},
            "points": [{k: (_fmt(v) if isinstance(v, Fraction) else v) for k, v in p.items()}
                       for p in self.points],
            "discrepancies": self.discrepancies,
        }


def _scaled_totals(plan: ParityPlan):
    b, p = plan.baseline, plan.planned
    r_base = Fraction(b.d_expert, b.d)
    r_plan = Fraction(plan.d_expert_exact) / b.d

    def base_total(B, d):
        return count_smoe_ops(B, d, r_base * d, b.k, b.activation).total_ops

    def plan_total(B, d):
        return count_mhmoe_ops(B, Fraction(d), p.h, r_plan * d, p.k, p.activation,
                               p.use_head_layer, p.use_merge_layer).total_ops

    return r_base, r_plan, base_total, plan_total


def verify_parity(plan: ParityPlan, B_grid=(1, 2, 8), d_grid=(64, 128, 256, 768)) -> ParityVerification:
    """Evaluate both configurations with dimensions scaled in proportion to d
    (planned inner dimension un-rounded), fit the residual per B as a quadratic
    in d, and check the d^2 term vanishes.  Known quoted closed forms that the
    exact counts contradict are listed in ``discrepancies``."""
    r_base, r_plan, base_total, plan_total = _scaled_totals(plan)
    points, fits = [], {}
    for B in B_grid:
        residuals = []
        for d in d_grid:
            bt, pt = base_total(B, d), plan_total(B, d)
            residuals.append(Fraction(pt) - Fraction(bt))
            points.append({"B": B, "d": d, "baseline": bt, "planned": pt, "residual": residuals[-1]})
        (a, b, c), exact = fit_quadratic(list(d_grid), residuals)
        fits[B] = {"d2": a, "d1": b, "d0": c, "exact_fit": exact}
    quad_zero = all(f["d2"] == 0 and f["exact_fit"] for f in fits.values())

    base_form = bd_coefficients(lambda d: base_total(1, d))
    plan_form = bd_coefficients(lambda d: plan_total(1, d))
    notes = []
    p = plan.planned
    for claim in CLAIMED_FORMS:
        for form, h, ratio, k in ((plan_form, p.h, r_plan, p.k), (base_form, 1, r_base, plan.baseline.k)):
            if (claim.h, claim.expert_ratio, claim.k, claim.activation) != (h, ratio, k, p.activation):
                continue
            if h > 1 and not (p.use_head_layer and p.use_merge_layer):
                continue
            if form != (claim.quadratic, claim.linear):
                notes.append(f"{claim.label}: quoted {poly_str(claim.quadratic, claim.linear)} "
                             f"but exact count is {poly_str(*form)}")
    return ParityVerification(points, fits, base_form, plan_form, quad_zero, notes)


def leading_ops_per_token(cfg: MoEConfig) -> int:
    """Leading-order per-token ops: ``2*n_proj*d^2 + c*d*d_expert*k``."""
    n_proj = int(cfg.use_head_layer) + int(cfg.use_merge_layer)
    return 2 * n_proj * cfg.d * cfg.d + OPS_COEF[cfg.activation] * cfg.d * cfg.d_expert * cfg.k
