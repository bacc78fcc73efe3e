#!/usr/bin/env python3
"""How much of the model the attack touches, and how different the gradients look."""
from saleak.experiment import DatasetConfig, ExperimentConfig, ModelConfig, run_experiment

for label, cfg in [
    ("fcn3", ExperimentConfig(trials=5)),
    ("cnn_bn d=4", ExperimentConfig(dataset=DatasetConfig(shape=(1, 8, 8)), model=ModelConfig(kind="cnn_bn"), trials=5)),
    ("cnn_bn d=64", ExperimentConfig(dataset=DatasetConfig(shape=(1, 8, 8)),
                                     model=ModelConfig(kind="cnn_bn", channels=64), trials=5)),
]:
    rep = run_experiment(cfg)
    row = rep.rows[0]
    print(f"{label:12s} NoMP {row['nomp']:7d}  Ratio {row['ratio']:.5f}  CosSim {rep.mean('cossim_mean'):.3f}")
