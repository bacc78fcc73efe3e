#!/usr/bin/env python3
"""One FedSGD round under secure aggregation, and the server reading every client's labels anyway."""
import numpy as np

from saleak.attack import FishingServer, run_attack
from saleak.data import gen_synthetic
from saleak.federation import FederationState, RoundConfig, partition, run_round
from saleak.nn import fcn3

rng = np.random.default_rng(0)
data = gen_synthetic(n_classes=10, dim=64, seed=0, n_samples=20000)
clients = partition(data.samples, data.labels, n_clients=100, n_classes=10, rng=rng)
model = fcn3(64, 10, hidden=(256, 128), rng=rng)
state = FederationState(model, clients, n_classes=10)

# the server hands each selected client its own fishing model
server = FishingServer(seed=1)
record = run_round(state, RoundConfig(clients_per_round=5, batch_size=64, sa_mode="masked", seed=7), attack_hook=server)

print("selected clients:", record.client_ids)
print("constants used:  ", [round(k.constant, 4) for k in server.kits])

# the server only sees record.aggregate (a masked sum), yet:
for res, batch in zip(run_attack(record, server.kits), record.batches):
    ok = "exact" if np.array_equal(res.counts, batch.true_counts) else "WRONG"
    print(f"client {res.client_id:3d}  inferred {res.counts.tolist()}  true {batch.true_counts.tolist()}  {ok}")
