"""FedSGD rounds: client sampling, one-step local gradients, secure aggregation, server update."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import secure_agg
from .errors import ConfigError, ShapeError
from .nn import GradientSet, Model, backward, forward, _layer_from_dict, _layer_to_dict

AttackHook = Callable[[Model, Sequence[int]], Sequence[Model]]
DefenseHook = Callable[[int, GradientSet], GradientSet]


def label_counts(labels, n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.int64)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ShapeError("sample and label counts differ")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class ClientBatch:
    inputs: np.ndarray
    labels: np.ndarray
    true_counts: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)


def partition(samples, labels, n_clients: int, n_classes: int, rng, alpha: float | None = None) -> list[ClientDataset]:
    """Split a dataset over ``n_clients``.

    With ``alpha=None`` the split is a uniform random partition; otherwise each
    class is spread over the clients with Dirichlet(alpha) proportions. Clients
    that end up empty receive one random sample so every client can train.
    """
    rng = np.random.default_rng(rng)
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if alpha is None:
        parts = np.array_split(rng.permutation(len(labels)), n_clients)
    else:
        if alpha <= 0:
            raise ConfigError("Dirichlet alpha must be positive")
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for c in range(n_classes):
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                buckets[k].extend(chunk.tolist())
        parts = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    out = []
    for cid, idx in enumerate(parts):
        if len(idx) == 0:
            idx = rng.integers(0, len(labels), size=1)
        out.append(ClientDataset(cid, samples[idx], labels[idx]))
    return out


def draw_batch(dataset: ClientDataset, batch_size: int, n_classes: int, rng) -> ClientBatch:
    """Sample ``batch_size`` examples, with replacement only if the client holds fewer."""
    rng = np.random.default_rng(rng)
    if batch_size < 1:
        raise ConfigError("batch size must be positive")
    idx = rng.choice(len(dataset), size=batch_size, replace=len(dataset) < batch_size)
    labels = dataset.labels[idx]
    return ClientBatch(dataset.samples[idx], labels, label_counts(labels, n_classes))


def sample_round_clients(n_total: int, n_selected: int, rng) -> list[int]:
    if not 1 <= n_selected <= n_total:
        raise ConfigError(f"cannot select {n_selected} of {n_total} clients")
    rng = np.random.default_rng(rng)
    return [int(c) for c in rng.choice(n_total, size=n_selected, replace=False)]


def client_local_step(model: Model, batch: ClientBatch) -> GradientSet:
    """Batch-averaged gradient of one FedSGD step; the model is left untouched."""
    trace = forward(model, batch.inputs)
    return backward(model, trace, batch.labels)


def server_update(model: Model, agg: GradientSet, lr: float, n_selected: int) -> Model:
    return model.apply_gradients(agg, lr / n_selected)


@dataclass(frozen=True)
class RoundConfig:
    clients_per_round: int = 5
    batch_size: int = 64
    lr: float = 0.1
    sa_mode: str = secure_agg.IDEAL
    sa_bits: int = secure_agg.DEFAULT_BITS
    seed: int = 0

    def __post_init__(self):
        if self.sa_mode not in secure_agg.MODES:
            raise ConfigError(f"unknown secure-aggregation mode {self.sa_mode!r}")


@dataclass
class FederationState:
    model: Model
    datasets: list
    n_classes: int
    round_index: int = 0


@dataclass(frozen=True)
class RoundRecord:
    """Everything that happened in one round.

    ``client_grads`` (what each client submitted) and ``raw_client_grads``
    (before any defense) are kept only for oracle checks; the attack reads
    ``aggregate`` and the distributed ``models``.
    """

    round_index: int
    client_ids: tuple
    batch_size: int
    sa_mode: str
    sa_bits: int
    models: tuple
    batches: tuple
    client_grads: tuple
    raw_client_grads: tuple
    aggregate: GradientSet
    next_model: Model
    updates: tuple = field(default=(), repr=False)


def run_round(state: FederationState, config: RoundConfig,
              attack_hook: Optional[AttackHook] = None,
              defense_hook: Optional[DefenseHook] = None) -> RoundRecord:
    """Run one FedSGD round with secure aggregation.

    ``attack_hook(base_model, client_ids)`` returns the per-client models the
    server distributes (the honest server sends ``state.model`` to everyone).
    ``defense_hook(client_id, grads)`` is applied by each client before encoding.
    """
    model = state.model
    n_sel = config.clients_per_round
    if attack_hook is not None and n_sel > model.embedding_dim + 1:
        raise ConfigError(
            f"{n_sel} clients exceed embedding_dim + 1 = {model.embedding_dim + 1}; disaggregation has no unique solution"
        )
    seq = np.random.SeedSequence([config.seed, state.round_index])
    select_seq, batch_seq, mask_seq = seq.spawn(3)
    ids = sample_round_clients(len(state.datasets), n_sel, np.random.default_rng(select_seq))
    models = tuple(attack_hook(model, ids)) if attack_hook is not None else (model,) * n_sel
    if len(models) != n_sel:
        raise ConfigError("attack hook must return one model per selected client")

    batch_rngs = [np.random.default_rng(s) for s in batch_seq.spawn(n_sel)]
    batches, raw, submitted = [], [], []
    for cid, local_model, brng in zip(ids, models, batch_rngs):
        batch = draw_batch(state.datasets[cid], config.batch_size, state.n_classes, brng)
        grads = client_local_step(local_model, batch)
        batches.append(batch)
        raw.append(grads)
        submitted.append(defense_hook(cid, grads) if defense_hook is not None else grads)

    plan = secure_agg.MaskPlan(tuple(ids), int(mask_seq.generate_state(1)[0]))
    updates = [secure_agg.encode(g, plan, cid, config.sa_mode, config.sa_bits) for cid, g in zip(ids, submitted)]
    aggregate = secure_agg.aggregate_decode(updates, plan, model.layout())
    next_model = server_update(model, aggregate, config.lr, n_sel)
    return RoundRecord(
        round_index=state.round_index,
        client_ids=tuple(ids),
        batch_size=config.batch_size,
        sa_mode=config.sa_mode,
        sa_bits=config.sa_bits,
        models=models,
        batches=tuple(batches),
        client_grads=tuple(submitted),
        raw_client_grads=tuple(raw),
        aggregate=aggregate,
        next_model=next_model,
        updates=tuple(updates),
    )


def save_round(record: RoundRecord, path) -> None:
    """Write a round to ``.npz`` for offline replay (float arrays round-trip exactly)."""
    base = record.next_model
    meta = {
        "round_index": record.round_index,
        "client_ids": list(record.client_ids),
        "batch_size": record.batch_size,
        "sa_mode": record.sa_mode,
        "sa_bits": record.sa_bits,
        "input_shape": list(base.input_shape),
        "layers": [_layer_to_dict(l) for l in base.layers],
    }
    arrays = {
        "__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        "aggregate": record.aggregate.flatten(),
        "client_grads": np.stack([g.flatten() for g in record.client_grads]),
        "raw_client_grads": np.stack([g.flatten() for g in record.raw_client_grads]),
        "models": np.stack([m.flat_params() for m in record.models]),
        "next_model": base.flat_params(),
        "batch_inputs": np.stack([b.inputs for b in record.batches]),
        "batch_labels": np.stack([b.labels for b in record.batches]),
        "batch_counts": np.stack([b.true_counts for b in record.batches]),
    }
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_round(path) -> RoundRecord:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    layers = tuple(_layer_from_dict(d) for d in meta["layers"])
    template = Model(layers, [l.init_params(np.random.default_rng(0)) for l in layers], tuple(meta["input_shape"]))
    layout = template.layout()

    def model_from(flat):
        g = GradientSet.from_flat(layout, flat)
        return Model(layers, g.grads, template.input_shape)

    batches = tuple(
        ClientBatch(x, y, c) for x, y, c in zip(arrays["batch_inputs"], arrays["batch_labels"], arrays["batch_counts"])
    )
    return RoundRecord(
        round_index=meta["round_index"],
        client_ids=tuple(meta["client_ids"]),
        batch_size=meta["batch_size"],
        sa_mode=meta["sa_mode"],
        sa_bits=meta["sa_bits"],
        models=tuple(model_from(f) for f in arrays["models"]),
        batches=batches,
        client_grads=tuple(GradientSet.from_flat(layout, f) for f in arrays["client_grads"]),
        raw_client_grads=tuple(GradientSet.from_flat(layout, f) for f in arrays["raw_client_grads"]),
        aggregate=GradientSet.from_flat(layout, arrays["aggregate"]),
        next_model=model_from(arrays["next_model"]),
    )
