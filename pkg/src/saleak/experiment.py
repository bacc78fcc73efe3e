"""Experiment configuration, seeded trial loop, sweeps and CSV/JSON reports."""
from __future__ import annotations

import csv
import functools
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import attack as atk
from . import data as datasets
from . import federation as fed
from . import metrics
from .defenses import COMPRESSION, GAUSSIAN, DefenseConfig, make_defense_hook
from .errors import ConfigError, SaleakError
from .nn import cnn_bn, fcn3
from .secure_agg import DEFAULT_BITS, IDEAL, MODES

SYNTHETIC = "synthetic"
MNIST = "mnist"
FCN3 = "fcn3"
CNN_BN = "cnn_bn"

COLUMNS = (
    "trial", "status", "stage", "error", "lnacc_all", "lnacc_target_mean", "lnacc_target_min",
    "nomp", "ratio", "cossim_mean", "max_b_err", "max_int_dev", "rcond", "sum_mismatch",
)
SWEEP_AXES = {"batch_size": "batch_size", "clients": "clients_per_round", "sigma": "sigma", "theta": "theta"}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = SYNTHETIC
    n_classes: int = 10
    dim: int = 64
    shape: Optional[tuple] = None
    n_samples: int = 20000
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (SYNTHETIC, MNIST):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.kind == MNIST and self.path is not None and datasets.find_mnist(self.path) is None:
            raise ConfigError(f"no MNIST IDX files under {self.path}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = FCN3
    hidden: tuple = (256, 128)
    channels: int = 4
    kernel: int = 3
    dense: int = 64

    def __post_init__(self):
        if self.kind not in (FCN3, CNN_BN):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    n_clients: int = 100
    clients_per_round: int = 5
    batch_size: int = 64
    lr: float = 0.1
    trials: int = 20
    sa_mode: str = IDEAL
    sa_bits: int = DEFAULT_BITS
    attack: bool = True
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    alpha: Optional[float] = None
    c_policy: str = atk.SPREAD
    c_range: tuple = atk.DEFAULT_C_RANGE
    repair: bool = False
    seed: int = 0
    output: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "c_range", tuple(float(c) for c in self.c_range))
        if len(self.c_range) != 2 or not 0 < self.c_range[0] < self.c_range[1]:
            raise ConfigError(f"c_range must be (low, high) with 0 < low < high, got {self.c_range}")
        if self.sa_mode not in MODES:
            raise ConfigError(f"unknown secure-aggregation mode {self.sa_mode!r}")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigError(f"U={self.clients_per_round} must lie in [1, N={self.n_clients}]")
        if self.batch_size < 1 or self.trials < 1:
            raise ConfigError("batch size and trial count must be positive")
        if self.attack:
            m = embedding_dim(self.model)
            if self.clients_per_round > m + 1:
                raise ConfigError(f"U={self.clients_per_round} exceeds embedding_dim + 1 = {m + 1}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def embedding_dim(model: ModelConfig) -> int:
    return model.hidden[-1] if model.kind == FCN3 else model.dense


def _build(cls, raw):
    if raw is None:
        return cls()
    if isinstance(raw, cls):
        return raw
    known = set(cls.__dataclass_fields__)
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    extra = set(raw) - set(ExperimentConfig.__dataclass_fields__)
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    raw["dataset"] = _build(DatasetConfig, raw.get("dataset"))
    raw["model"] = _build(ModelConfig, raw.get("model"))
    raw["defense"] = _build(DefenseConfig, raw.get("defense"))
    return ExperimentConfig(**raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# data and models


@functools.lru_cache(maxsize=8)
def load_dataset(cfg: DatasetConfig) -> datasets.LabeledData:
    if cfg.kind == SYNTHETIC:
        return datasets.gen_synthetic(cfg.n_classes, cfg.dim, cfg.seed, cfg.n_samples, cfg.shape)
    found = datasets.find_mnist(cfg.path)
    if found is None:
        raise ConfigError(f"MNIST files not found; pass dataset.path or set {datasets.DATA_DIR_ENV}")
    return datasets.load_mnist_idx(*found)


def build_model(cfg: ModelConfig, sample_shape: tuple, n_classes: int, rng):
    if cfg.kind == FCN3:
        return fcn3(int(np.prod(sample_shape)), n_classes, cfg.hidden, rng)
    if len(sample_shape) != 3:
        raise ConfigError(f"cnn_bn needs (channels, height, width) samples, got shape {sample_shape}")
    return cnn_bn(sample_shape, n_classes, cfg.channels, cfg.kernel, 1, cfg.dense, rng)


# --------------------------------------------------------------------------
# report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Report:
    config: dict
    rows: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    axis: Optional[str] = None

    @property
    def columns(self) -> tuple:
        return (self.axis,) + COLUMNS if self.axis else COLUMNS

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"config": self.config, "axis": self.axis, "columns": list(self.columns),
                "rows": self.rows, "trials": self.trials, "timings": self.timings}

    def write(self, path) -> tuple[Path, Path]:
        """Write ``<path>`` (CSV) and ``<path>.json`` next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv_text())
        side = path.with_suffix(path.suffix + ".json")
        side.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path, side

    def values(self, column: str, **where) -> list:
        return [r[column] for r in self.rows
                if r.get(column) is not None and all(r.get(k) == v for k, v in where.items())]

    def mean(self, column: str, **where) -> Optional[float]:
        vals = self.values(column, **where)
        return float(np.mean(vals)) if vals else None


# --------------------------------------------------------------------------
# trials


class _Stage:
    def __init__(self):
        self.name = "setup"


def _empty_row(trial: int) -> dict:
    row = {c: None for c in COLUMNS}
    row["trial"] = trial
    return row


def run_trial(config: ExperimentConfig, trial: int) -> tuple[dict, dict]:
    """One seeded trial: fresh model and partition, one round, attack, metrics."""
    row, detail = _empty_row(trial), {"trial": trial}
    stage = _Stage()
    try:
        seq = np.random.SeedSequence([config.seed, trial])
        model_seq, part_seq, round_seq, attack_seq = seq.spawn(4)
        stage.name = "data"
        data = load_dataset(config.dataset)
        samples = data.samples
        if config.model.kind == FCN3:
            samples = samples.reshape(len(samples), -1)
        stage.name = "model"
        model = build_model(config.model, samples.shape[1:], data.n_classes, np.random.default_rng(model_seq))
        if config.attack and config.clients_per_round > model.embedding_dim + 1:
            raise ConfigError(f"U={config.clients_per_round} exceeds embedding_dim + 1")
        stage.name = "partition"
        parts = fed.partition(samples, data.labels, config.n_clients, data.n_classes,
                              np.random.default_rng(part_seq), config.alpha)
        state = fed.FederationState(model, parts, data.n_classes)
        rcfg = fed.RoundConfig(config.clients_per_round, config.batch_size, config.lr,
                               config.sa_mode, config.sa_bits, int(round_seq.generate_state(1)[0]))
        defense = make_defense_hook(config.defense, salt=trial)

        if not config.attack:
            stage.name = "round"
            record = fed.run_round(state, rcfg, None, defense)
            detail["client_ids"] = list(record.client_ids)
            detail["benign_grad_norms"] = [float(np.linalg.norm(g.flatten())) for g in record.client_grads]
            detail["aggregate_norm"] = float(np.linalg.norm(record.aggregate.flatten()))
            row["status"] = "ok"
            return row, detail

        server = atk.FishingServer(config.c_policy, seed=attack_seq, c_range=config.c_range)

        def hook(base, ids):
            stage.name = "fishing"
            kits = server(base, ids)
            stage.name = "round"
            return kits

        stage.name = "round"
        record = fed.run_round(state, rcfg, hook, defense)
        stage.name = "attack"
        results = atk.run_attack(record, server.kits, config.repair)
        stage.name = "metrics"
        preds = [r.counts for r in results]
        truths = [b.true_counts for b in record.batches]
        targets = metrics.lnacc_target(preds, truths)
        nomp, ratio = metrics.nomp_ratio(server.kits[0].model, model)
        benign = fed.run_round(state, rcfg, None, None)
        cos = [metrics.cos_sim(a, b) for a, b in zip(record.raw_client_grads, benign.raw_client_grads)]
        b_err = max(float(np.max(np.abs(r.b_grad - g.fcl_bias))) for r, g in zip(results, record.client_grads))
        int_dev = max(float(np.max(np.abs(r.real_counts - np.rint(r.real_counts)))) for r in results)
        row.update(
            status="ok", lnacc_all=metrics.lnacc_all(preds, truths), lnacc_target_mean=float(np.mean(targets)),
            lnacc_target_min=float(np.min(targets)), nomp=nomp, ratio=ratio, cossim_mean=float(np.mean(cos)),
            max_b_err=b_err, max_int_dev=int_dev, rcond=results[0].rcond,
            sum_mismatch=int(sum(abs(r.sum_mismatch) for r in results)),
        )
        detail.update(
            client_ids=list(record.client_ids), constants=[k.constant for k in server.kits],
            lnacc_target=targets, cossim=cos, true_counts=[t.tolist() for t in truths],
            attack=[r.to_dict() for r in results],
        )
    except (SaleakError, ValueError, ArithmeticError) as exc:
        row.update(status="error", stage=stage.name, error=f"{type(exc).__name__}: {exc}")
    return row, detail


def run_experiment(config: ExperimentConfig, out=None) -> Report:
    """Run ``config.trials`` independent trials and optionally write the report.

    Wall-clock timings go to the JSON sidecar only, so CSV bodies are identical
    across runs with the same configuration.
    """
    report = Report(config.to_dict())
    for t in range(config.trials):
        start = time.perf_counter()
        row, detail = run_trial(config, t)
        report.timings.append(time.perf_counter() - start)
        report.rows.append(row)
        report.trials.append(detail)
    out = out or config.output
    if out:
        report.write(out)
    return report


def with_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if axis == "batch_size":
        return replace(config, batch_size=int(value))
    if axis == "clients":
        return replace(config, clients_per_round=int(value))
    d = config.defense
    if axis == "sigma":
        return replace(config, defense=replace(d, kind=GAUSSIAN, sigma=float(value)))
    return replace(config, defense=replace(d, kind=COMPRESSION, theta=float(value)))


def run_sweep(config: ExperimentConfig, axis: str, values, out=None) -> Report:
    """One experiment per axis value; rows are merged with the axis value as the first column.

    A point whose configuration is invalid is reported as failed trials and the
    sweep moves on.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    merged = Report(config.to_dict(), axis=axis)
    for value in values:
        try:
            point = run_experiment(with_axis(config, axis, value))
        except (SaleakError, ValueError) as exc:
            for t in range(config.trials):
                row = _empty_row(t)
                row.update(status="error", stage="config", error=f"{type(exc).__name__}: {exc}")
                merged.rows.append({axis: value, **row})
                merged.trials.append({axis: value, "trial": t})
            continue
        merged.rows.extend({axis: value, **r} for r in point.rows)
        merged.trials.extend({axis: value, **d} for d in point.trials)
        merged.timings.extend(point.timings)
    out = out or config.output
    if out:
        merged.write(out)
    return merged
