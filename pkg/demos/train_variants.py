"""
Training the five variants for a few steps
==========================================

Dense, SMoE, fine-grained SMoE and the two multi-head variants start from
one seed and see the same batches.  Pass ``--bitnet`` or ``--shared`` to
switch on ternary weights or a shared expert.  The step count is kept small
so this finishes in a few minutes on one core.
"""

import logging
import sys

from mhmoe import lm

logging.basicConfig(level=logging.INFO, format="%(message)s")

steps = 40
bitnet = "--bitnet" in sys.argv
shared = "--shared" in sys.argv

base = lm.default_config()
result = lm.run_variant_suite(base, lm.bundled_corpus(), steps, lm.TrainHyper(total_steps=steps),
                              bitnet=bitnet, shared_expert=shared)

for name, row in result.precheck.items():
    print(f"{name:20s} leading ops/token {row['leading_ops_per_token']:>8,}  MoE params {row['moe_params']}")
print()
print(result.to_markdown())
