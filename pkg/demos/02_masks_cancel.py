#!/usr/bin/env python3
"""Pairwise masks hide each update but vanish from the sum."""
import numpy as np

from saleak.nn import GradientSet
from saleak.secure_agg import MASKED, MaskPlan, aggregate_decode, encode, quantize

rng = np.random.default_rng(3)
layout = ((("g", (8,)),),)
grads = [GradientSet.from_flat(layout, rng.uniform(-1, 1, 8)) for _ in range(4)]
plan = MaskPlan(client_ids=(11, 4, 29, 8), seed=2024)

updates = [encode(g, plan, cid, MASKED) for cid, g in zip(plan.client_ids, grads)]
print("client 11 plaintext (fixed point):", quantize(grads[0].flatten())[:3])
print("client 11 on the wire:            ", updates[0].payload[:3])

total = np.zeros(8, dtype=np.uint64)
for cid in plan.client_ids:
    total += plan.client_mask(cid, 8)
print("sum of all masks mod 2**64:", total)

decoded = aggregate_decode(updates, plan, layout).flatten()
truth = sum(g.flatten() for g in grads)
print("max decode error:", np.abs(decoded - truth).max(), "bound:", len(grads) / 2 ** 25)
