"""Label inference from securely aggregated gradients with per-client fishing models.

The server modifies one layer of the global model so that its output is a
constant vector ``C * 1``. Everything after that layer, including the
embedding ``e`` and logits ``y`` fed into and produced by the final fully
connected layer, then no longer depends on the client's data. Each client gets
a different constant, so the server knows every client's ``(e, y)`` in advance.

For a fishing model every row of the final-layer weight gradient is the bias
gradient times ``e``. Summed over clients this gives, for each class ``i``, the
linear system::

    [1 ... 1 ] [db_i^1]   [db_i^sa  ]
    [e^1 ... e^U] [ ... ] = [dW_i^sa^T]
                 [db_i^U]

which recovers every client's bias gradient. The per-client count of class
``i`` is then ``B * softmax(y)_i - B * db_i``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (ArchitectureError, ConditioningError, ConfigError, DataAgnosticError,
                     SaleakError)
from .nn import BatchNorm, Dense, Model, forward, softmax
from .tensor import LstsqResult, lstsq, reciprocal_condition

DEFAULT_RCOND_MIN = 1e-8
DEFAULT_MAX_RETRIES = 16
PROBE_RTOL = 1e-12
SPREAD = "spread"
LINEAR = "linear"
DEFAULT_C_RANGE = (1e-3, 10.0)


class NotSingleSampleError(SaleakError, ValueError):
    pass


# --------------------------------------------------------------------------
# fishing models


@dataclass(frozen=True)
class FishingKit:
    client_id: int
    model: Model
    constant: float
    embedding: np.ndarray
    logits: np.ndarray
    layer_index: int


def find_fishing_layer(model: Model) -> int:
    """Index of the layer to modify.

    The last batch-norm layer when there is one (no later batch norm can undo
    the constant output); otherwise the first layer if it is a fully connected
    layer other than the classifier.
    """
    bn = [i for i, layer in enumerate(model.layers) if isinstance(layer, BatchNorm)]
    if bn:
        return bn[-1]
    if isinstance(model.layers[0], Dense) and model.fcl_index > 0:
        return 0
    raise ArchitectureError("model has neither a batch-norm layer nor a leading fully connected layer")


def make_fishing_model(base: Model, layer_index: int, constant: float) -> Model:
    if not constant > 0:
        raise ConfigError("fishing constant must be positive")
    layer = base.layers[layer_index]
    if isinstance(layer, BatchNorm):
        return base.replace_params(layer_index, gamma=0.0, beta=constant)
    if isinstance(layer, Dense):
        return base.replace_params(layer_index, weight=0.0, bias=constant)
    raise ArchitectureError(f"layer {layer_index} ({layer.kind}) cannot be turned into a fishing layer")


def _layer_output_shape(model: Model, layer_index: int) -> tuple:
    shape = model.input_shape
    for layer in model.layers[: layer_index + 1]:
        shape = layer.output_shape(shape)
    return shape


def constant_embeddings(model: Model, layer_index: int, constants) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and logits produced when layer ``layer_index`` outputs ``C * 1``, one row per constant."""
    constants = np.asarray(constants, dtype=np.float64).reshape(-1)
    shape = _layer_output_shape(model, layer_index)
    x = np.broadcast_to(constants.reshape((-1,) + (1,) * len(shape)), (constants.size,) + shape)
    trace = forward(model, x, start=layer_index + 1)
    return trace.embedding, trace.logits


def coefficient_matrix(embeddings) -> np.ndarray:
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    return np.vstack([np.ones(e.shape[0]), e.T])


def _spread_constants(base, layer_index, n, c_min, c_max, n_grid):
    # pivoted QR over a geometric grid picks the constants whose coefficient
    # columns are most linearly independent
    grid = np.geomspace(c_min, c_max, n_grid)
    emb, _ = constant_embeddings(base, layer_index, grid)
    _, _, piv = scipy.linalg.qr(coefficient_matrix(emb), pivoting=True, mode="economic")
    return grid[piv[:n]]


def choose_constants(base: Model, layer_index: int, n: int, policy=SPREAD, rng=None,
                     rcond_min: float = DEFAULT_RCOND_MIN, max_retries: int = DEFAULT_MAX_RETRIES,
                     c_range=DEFAULT_C_RANGE, n_grid: int = 512) -> np.ndarray:
    """Pick ``n`` distinct positive constants whose embeddings give a well-conditioned system.

    ``policy`` is ``"spread"`` (grid search), ``"linear"`` (``0.5 + 0.1 * rank``,
    redrawn uniformly from (0.1, 2) on failure) or an explicit sequence.
    """
    if n < 1:
        raise ConfigError("need at least one client")
    if n > base.embedding_dim + 1:
        raise ConfigError(f"{n} clients exceed embedding_dim + 1 = {base.embedding_dim + 1}")

    def rcond_of(cs):
        emb, _ = constant_embeddings(base, layer_index, cs)
        return reciprocal_condition(coefficient_matrix(emb))

    if isinstance(policy, str):
        if policy == SPREAD:
            candidates = [_spread_constants(base, layer_index, n, c_range[0], c_range[1], n_grid)]
        elif policy == LINEAR:
            rng = np.random.default_rng(rng)
            first = 0.5 + 0.1 * np.arange(n)
            candidates = [first] + [rng.uniform(0.1, 2.0, size=n) for _ in range(max_retries)]
        else:
            raise ConfigError(f"unknown constant policy {policy!r}")
    else:
        candidates = [np.asarray(policy, dtype=np.float64)]
        if candidates[0].shape != (n,):
            raise ConfigError(f"expected {n} constants, got {candidates[0].shape}")

    best = 0.0
    for cs in candidates:
        if np.any(cs <= 0) or len(np.unique(cs)) != n:
            continue
        rc = rcond_of(cs)
        if rc > rcond_min:
            return cs
        best = max(best, rc)
    raise ConditioningError(
        f"no constants gave reciprocal condition above {rcond_min:g} for {n} clients (best {best:.3g})", best
    )


def preset_probe(kit: FishingKit | Model, inputs=None) -> tuple[np.ndarray, np.ndarray]:
    """Embedding and logits of a fishing model, checked to be input independent.

    Probes with a zeros sample and a ones sample unless ``inputs`` is given, in
    which case every row of ``inputs`` must produce the same output.
    """
    model = kit.model if isinstance(kit, FishingKit) else kit
    if inputs is None:
        inputs = np.stack([np.zeros(model.input_shape), np.ones(model.input_shape)])
    trace = forward(model, inputs)
    e, y = trace.embedding, trace.logits
    if not (_same(e, e[0]) and _same(y, y[0])):
        raise DataAgnosticError("fishing model output depends on its input")
    # a single-sample pass must agree too: batch statistics and BLAS paths differ
    single = forward(model, inputs[:1])
    if not (_same(single.embedding, e[0]) and _same(single.logits, y[0])):
        raise DataAgnosticError("fishing model output depends on the batch composition")
    return e[0].copy(), y[0].copy()


def _same(rows, ref) -> bool:
    # matmul kernels round differently for different batch shapes
    return bool(np.allclose(rows, np.broadcast_to(ref, rows.shape), rtol=PROBE_RTOL, atol=PROBE_RTOL))


def build_fishing_models(base: Model, client_ids: Sequence[int], c_policy=SPREAD, rng=None,
                         rcond_min: float = DEFAULT_RCOND_MIN, max_retries: int = DEFAULT_MAX_RETRIES,
                         c_range=DEFAULT_C_RANGE) -> list[FishingKit]:
    """One fishing model per client, with preset embeddings and logits verified by probing."""
    rng = np.random.default_rng(rng)
    layer_index = find_fishing_layer(base)
    constants = choose_constants(base, layer_index, len(client_ids), c_policy, rng, rcond_min, max_retries, c_range)
    kits = []
    for cid, c in zip(client_ids, constants):
        model = make_fishing_model(base, layer_index, float(c))
        e, y = preset_probe(model)
        preset_probe(model, rng.standard_normal((2,) + model.input_shape))
        kits.append(FishingKit(int(cid), model, float(c), e, y, layer_index))
    return kits


class FishingServer:
    """Attack hook for :func:`saleak.federation.run_round`; remembers the kits it handed out."""

    def __init__(self, c_policy=SPREAD, seed=None, rcond_min: float = DEFAULT_RCOND_MIN, c_range=DEFAULT_C_RANGE):
        self.c_policy = c_policy
        self.c_range = tuple(c_range)
        self.rng = np.random.default_rng(seed)
        self.rcond_min = rcond_min
        self.kits: list[FishingKit] = []

    def __call__(self, base: Model, client_ids):
        self.kits = build_fishing_models(base, client_ids, self.c_policy, self.rng, self.rcond_min,
                                         c_range=self.c_range)
        return [k.model for k in self.kits]


# --------------------------------------------------------------------------
# disaggregation and label inference


@dataclass(frozen=True)
class DisaggregationSystem:
    coefficients: np.ndarray  # (m + 1) x U
    rhs: np.ndarray  # (m + 1) x n
    rcond: float

    @property
    def n_clients(self) -> int:
        return self.coefficients.shape[1]


def build_system(agg_weight, agg_bias, embeddings) -> DisaggregationSystem:
    agg_weight = np.asarray(agg_weight, dtype=np.float64)
    agg_bias = np.asarray(agg_bias, dtype=np.float64).reshape(-1)
    coef = coefficient_matrix(embeddings)
    n, m = agg_weight.shape
    if coef.shape[0] != m + 1:
        raise ConfigError(f"embeddings have length {coef.shape[0] - 1}, weight gradient has {m} columns")
    if agg_bias.shape != (n,):
        raise ConfigError("bias gradient length does not match the weight gradient")
    if coef.shape[1] > m + 1:
        raise ConfigError(f"{coef.shape[1]} clients exceed embedding_dim + 1 = {m + 1}")
    rhs = np.vstack([agg_bias[None, :], agg_weight.T])
    return DisaggregationSystem(coef, rhs, reciprocal_condition(coef))


def solve_system(system: DisaggregationSystem, rcond_min: float = DEFAULT_RCOND_MIN) -> LstsqResult:
    if system.rcond <= rcond_min:
        raise ConditioningError(
            f"coefficient matrix reciprocal condition {system.rcond:.3g} is below {rcond_min:g}", system.rcond
        )
    return lstsq(system.coefficients, system.rhs)


def disaggregate(agg_weight, agg_bias, embeddings, rcond_min: float = DEFAULT_RCOND_MIN) -> np.ndarray:
    """Per-client final-layer bias gradients, shape ``(U, n)``, from the aggregated FCL gradients.

    All ``n`` classes share one factorization of the coefficient matrix.
    """
    return solve_system(build_system(agg_weight, agg_bias, embeddings), rcond_min).solution


@dataclass(frozen=True)
class LabelEstimate:
    counts: np.ndarray
    real_counts: np.ndarray
    sum_mismatch: int


def _largest_remainder(real, total):
    base = np.clip(np.floor(real), 0, total).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        order = np.argsort(-(real - base), kind="stable")
        base[order[:short]] += 1
    elif short < 0:
        order = np.argsort(real - base, kind="stable")
        for i in order:
            if short == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                short += 1
    return base


def infer_labels(b_grad, logits, batch_size: int, repair: bool = False) -> LabelEstimate:
    """Class counts of a batch from its bias gradient and the (shared) logits of every sample.

    Because a fishing model gives every sample the same logits, the per-sample
    softmax sum is ``batch_size * softmax(logits)``. Counts are rounded and
    clamped to ``[0, batch_size]``; with ``repair`` they are instead projected
    onto integer vectors summing to ``batch_size`` by largest remainder.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be positive")
    b_grad = np.asarray(b_grad, dtype=np.float64).reshape(-1)
    p = softmax(np.asarray(logits, dtype=np.float64).reshape(-1))
    real = batch_size * p - batch_size * b_grad
    if repair:
        counts = _largest_remainder(real, batch_size)
    else:
        counts = np.clip(np.rint(real), 0, batch_size).astype(np.int64)
    return LabelEstimate(counts, real, int(counts.sum() - batch_size))


def prop1_single_sample(b_grad) -> int:
    """Label of a single-sample gradient: the one non-positive bias-gradient entry."""
    b_grad = np.asarray(b_grad, dtype=np.float64).reshape(-1)
    nonpos = np.flatnonzero(b_grad <= 0)
    if nonpos.size != 1:
        raise NotSingleSampleError(f"expected exactly one non-positive entry, found {nonpos.size}")
    return int(nonpos[0])


def prop2_counts(b_grad, per_sample_logits, batch_size: int) -> np.ndarray:
    """Class counts from a batch-averaged bias gradient and the true per-sample logits."""
    y = np.atleast_2d(np.asarray(per_sample_logits, dtype=np.float64))
    if y.shape[0] != batch_size:
        raise ConfigError(f"{y.shape[0]} logit rows for batch size {batch_size}")
    real = softmax(y).sum(axis=0) - batch_size * np.asarray(b_grad, dtype=np.float64).reshape(-1)
    return np.rint(real).astype(np.int64)


@dataclass(frozen=True)
class AttackResult:
    client_id: int
    b_grad: np.ndarray
    real_counts: np.ndarray
    counts: np.ndarray
    sum_mismatch: int
    residual_norm: float
    rcond: float

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("b_grad", "real_counts", "counts"):
            d[k] = d[k].tolist()
        return d


def run_attack(record, kits: Sequence[FishingKit], repair: bool = False,
               rcond_min: float = DEFAULT_RCOND_MIN) -> list[AttackResult]:
    """Disaggregate the round's aggregate and infer every client's label counts.

    Only ``record.aggregate``, ``record.client_ids`` and ``record.batch_size`` are read.
    """
    by_id = {k.client_id: k for k in kits}
    try:
        ordered = [by_id[cid] for cid in record.client_ids]
    except KeyError as exc:
        raise ConfigError(f"no fishing kit for client {exc.args[0]}") from None
    system = build_system(record.aggregate.fcl_weight, record.aggregate.fcl_bias, [k.embedding for k in ordered])
    sol = solve_system(system, rcond_min)
    results = []
    for kit, b_grad in zip(ordered, sol.solution):
        est = infer_labels(b_grad, kit.logits, record.batch_size, repair)
        results.append(AttackResult(kit.client_id, b_grad.copy(), est.real_counts, est.counts,
                                    est.sum_mismatch, sol.residual_norm, system.rcond))
    return results


def save_attack_results(results: Sequence[AttackResult], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in results], fh, indent=2)


def load_attack_results(path) -> list[AttackResult]:
    with open(path) as fh:
        raw = json.load(fh)
    out = []
    for d in raw:
        out.append(AttackResult(
            client_id=d["client_id"], b_grad=np.array(d["b_grad"]), real_counts=np.array(d["real_counts"]),
            counts=np.array(d["counts"], dtype=np.int64), sum_mismatch=d["sum_mismatch"],
            residual_norm=d["residual_norm"], rcond=d["rcond"],
        ))
    return out
