"""
Head and merge projections on and off
=====================================

Four copies of a small two-head model, one per combination of the two d x d
projections, trained briefly from the same seed.  The table shows how much
per-token work each projection adds.
"""

from mhmoe import lm
from mhmoe.layers import MoEConfig
from mhmoe.parity import cost_report

steps = 30
cfg = lm.ModelConfig(n_layers=2, d=24, n_heads_attn=2, context_len=32, d_ff=64,
                     moe=MoEConfig(d=24, h=2, d_expert=32, E=8, k=2, activation="swiglu3mat"))
hyper = lm.TrainHyper(total_steps=steps)
train, val = lm.split_corpus(lm.bundled_corpus())

print("| head | merge | val ppl | MoE ops/token |")
print("|:-:|:-:|---:|---:|")
for head, merge in ((False, False), (True, False), (False, True), (True, True)):
    moe = cfg.moe.with_(use_head_layer=head, use_merge_layer=merge)
    state = lm.init_train_state(lm.ModelConfig(**{**vars(cfg), "moe": moe}))
    lm.train(state, train, steps, hyper)
    ppl = lm.evaluate_perplexity(state.model, val)
    mark = {True: "✓", False: "✗"}
    print(f"| {mark[head]} | {mark[merge]} | {ppl:.2f} | {cost_report(moe, 1).total_ops} |")
