"""
Sizing a multi-head MoE layer to match a top-1 SMoE
===================================================

Start from a plain SMoE layer and ask for h heads with top-k routing.  The
planner shrinks the expert width so per-token work stays the same to leading
order, then picks the expert count that keeps the parameter total level.
"""

from fractions import Fraction

from mhmoe.layers import MoEConfig
from mhmoe.parity import LegacyMHMoESpec, count_legacy_mhmoe_ops, poly_str, solve_parity, verify_parity

# A ReLU baseline with the classic 4x expert width
base = MoEConfig(d=48, d_expert=192, E=8, k=1)

plan = solve_parity(base, h=3, k=1)
print(plan.to_markdown())
print("exact inner width:", plan.d_expert_exact, " exact expert count:", plan.E_exact)

# The d^2 term of the op count cancels; only a Bd remainder is left
check = verify_parity(plan)
print("d^2 residual zero:", check.quadratic_zero)
print("baseline:", poly_str(*check.baseline_form), "  planned:", poly_str(*check.planned_form))

# The wide SwiGLU setting: 2048-wide experts, 8 of them, top-1
wide = MoEConfig(d=768, d_expert=2048, E=8, k=1, activation="swiglu3mat")
for h in (2, 3):
    p = solve_parity(wide, h=h, k=h)
    print(f"h={h}: d_expert={p.planned.d_expert} E={p.planned.E} (exact {p.E_exact}), "
          f"param residual {p.param_residual:+,}")

# The h=2, 3d, top-1 case does not land where the quoted closed form says
p = solve_parity(MoEConfig(d=64, d_expert=256, E=8, k=1), h=2, k=1)
for note in verify_parity(p).discrepancies:
    print("note:", note)

# The earlier beta-scaled sizing has two plausible readings
legacy = count_legacy_mhmoe_ops(1, 64, LegacyMHMoESpec(h=4, beta=Fraction(63, 64)))
print("d_expert = 4*beta*h*d ->", poly_str(*legacy.scaled_by_heads_coefficients))
print("d_expert = 4*beta*d   ->", poly_str(*legacy.unscaled_coefficients))
