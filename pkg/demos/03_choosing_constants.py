#!/usr/bin/env python3
"""Why the per-client constants cannot just be 0.5, 0.6, 0.7, ...

Behind the modified layer the network sees ``C * 1``; every later layer is
affine plus ReLU, so the embedding is a piecewise linear function of ``C``.
Constants that sit between the same activation kinks give embeddings on one
line, and the disaggregation system loses rank.
"""
import numpy as np

from saleak.attack import choose_constants, coefficient_matrix, constant_embeddings, find_fishing_layer
from saleak.nn import cnn_bn

model = cnn_bn((1, 8, 8), 10, channels=4, hidden=64, rng=0)
idx = find_fishing_layer(model)

for name, cs in [("evenly spaced", 0.5 + 0.1 * np.arange(10)),
                 ("grid search", choose_constants(model, idx, 10))]:
    emb, _ = constant_embeddings(model, idx, cs)
    a = coefficient_matrix(emb)
    s = np.linalg.svd(a, compute_uv=False)
    print(f"{name:14s} rank {np.linalg.matrix_rank(a):2d}/10  smallest singular value {s[-1]:.2e}")
    print("   constants:", np.round(np.sort(cs), 4))
