"""
Splitting tokens into sub-tokens and routing them separately
============================================================

With h heads each token becomes h slices of width d/h.  Every slice picks its
own experts, so two halves of one token can land in different places.
"""

import numpy as np

from mhmoe import Rng, Tensor
from mhmoe.layers import MoEConfig, init_params, load_balance_loss, mhmoe_forward

cfg = MoEConfig(d=8, h=2, d_expert=4, E=4, k=2, use_head_layer=True, use_merge_layer=True)
params = init_params(cfg, Rng(0), std=0.5)

x = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
y, routing = mhmoe_forward(x, params, cfg, return_routing=True)

print("output shape:", y.shape)
# rows 2i and 2i+1 are the two halves of token i
for token in range(3):
    halves = routing.indices[2 * token:2 * token + 2]
    weights = routing.weights.data[2 * token:2 * token + 2].round(3)
    print(f"token {token}: experts {halves.tolist()} weights {weights.tolist()}")

print("balance loss:", round(load_balance_loss(routing, cfg.E).item(), 4), "(1.0 is perfectly even)")
