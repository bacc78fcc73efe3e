#!/usr/bin/env python3
"""Client-side noise and compression against the attack."""
from dataclasses import replace

from saleak.experiment import ExperimentConfig, run_sweep

base = ExperimentConfig(trials=10)

noise = run_sweep(base, "sigma", [0.0, 1e-4, 1e-3, 1e-2])
for s in (0.0, 1e-4, 1e-3, 1e-2):
    print(f"sigma={s:<7g} mean LnAcc-all {noise.mean('lnacc_all', sigma=s):.3f}")

comp = run_sweep(replace(base, batch_size=16), "theta", [0.0, 0.2, 0.4, 0.8])
for t in (0.0, 0.2, 0.4, 0.8):
    print(f"theta={t:<4g} (B=16) mean LnAcc-all {comp.mean('lnacc_all', theta=t):.3f}")
