"""
Counting multiplies and adds, on paper and in a real forward pass
=================================================================

Every matrix product run through the autodiff core can report to an
``OpCounter``.  The closed-form counts should agree with it exactly.
"""

import numpy as np

from mhmoe import OpCounter, Rng, Tensor
from mhmoe.layers import MoEConfig, init_params, mhmoe_forward
from mhmoe.parity import cost_report


def measured(cfg, B):
    counter = OpCounter()
    x = Tensor(np.random.default_rng(0).normal(size=(B, cfg.d)))
    mhmoe_forward(x, init_params(cfg, Rng(0)), cfg, counter)
    return counter.paper_count


smoe = MoEConfig(d=4, d_expert=16, E=3, k=1)
mh = MoEConfig(d=4, h=2, d_expert=12, E=3, k=1, use_head_layer=True, use_merge_layer=True)

for name, cfg in (("SMoE", smoe), ("MH-MoE", mh)):
    r = cost_report(cfg, B=2)
    print(f"{name:7s} head={r.head_ops} experts={r.expert_ops} merge={r.merge_ops} "
          f"total={r.total_ops} measured={measured(cfg, 2)}")

# Dropping the head projection saves exactly 2Bd^2 - Bd
B, d = 5, 12
on = MoEConfig(d=d, h=2, d_expert=6, E=4, k=2, use_head_layer=True, use_merge_layer=True)
off = on.with_(use_head_layer=False)
print("head layer saves", measured(on, B) - measured(off, B), "=", 2 * B * d * d - B * d)
