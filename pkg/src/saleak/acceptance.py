"""End-to-end acceptance checks, shared by ``saleak verify`` and the test suite.

Every check returns a :class:`CriterionResult`; ``passed`` is ``None`` for a
check that could not run (missing data) and ``warning`` marks soft checks
whose failure is reported but not fatal.
"""
from __future__ import annotations

import contextlib
import functools
import io
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import data as datasets
from . import secure_agg
from .experiment import (CNN_BN, FCN3, MNIST, DatasetConfig, ExperimentConfig, ModelConfig, load_dataset,
                         run_experiment, run_sweep)
from .federation import FederationState, RoundConfig, label_counts, partition, run_round
from .metrics import nomp_ratio
from .nn import GradientSet, backward, cnn_bn, fcn3, forward, loss_and_gradients

BATCH_SIZES = (1, 16, 64, 256, 1024)
GRID_TRIALS = 20
FD_STEP = 1e-5
FD_TOL = 1e-4
FD_FLOOR = 1e-6
B_GRAD_TOL = 1e-6
INT_TOL = 1e-4
COSSIM_SMOKE = 0.5
R2_MIN = 0.9


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool | None
    detail: str
    warning: bool = False

    def line(self) -> str:
        if self.passed is None:
            tag = "SKIP"
        elif self.passed:
            tag = "PASS"
        else:
            tag = "WARN" if self.warning else "FAIL"
        return f"[{tag}] criterion {self.number} {self.name}: {self.detail}"


def mnist_dir():
    """Directory holding MNIST IDX files: ``$SALEAK_DATA_DIR`` or the bundled subset."""
    if datasets.find_mnist() is not None:
        return None
    bundled = Path(__file__).resolve().parents[2] / "data" / "mnist5k"
    return str(bundled) if datasets.find_mnist(bundled) else False


def setups(include_mnist: bool = True) -> list[tuple[str, ExperimentConfig]]:
    out = [
        ("synthetic/fcn3", ExperimentConfig(model=ModelConfig(kind=FCN3))),
        ("synthetic/cnn_bn", ExperimentConfig(dataset=DatasetConfig(shape=(1, 8, 8)), model=ModelConfig(kind=CNN_BN))),
    ]
    path = mnist_dir()
    if include_mnist and path is not False:
        out.insert(1, ("mnist/fcn3", ExperimentConfig(dataset=DatasetConfig(kind=MNIST, path=path))))
    return out


def client_counts(m: int) -> tuple:
    return (1, 2, 5, min(10, m + 1))


@functools.lru_cache(maxsize=4)
def grid(sa_mode: str, quick: bool = False) -> tuple:
    """Run the (setup, B, U) grid once per mode; returns ``(label, B, U, report)`` tuples."""
    trials = 2 if quick else GRID_TRIALS
    sizes = (1, 64, 1024) if quick else BATCH_SIZES
    out = []
    for label, base in setups():
        m = base.model.hidden[-1] if base.model.kind == FCN3 else base.model.dense
        for b in sizes:
            for u in client_counts(m):
                cfg = replace(base, batch_size=b, clients_per_round=u, trials=trials, sa_mode=sa_mode)
                out.append((label, b, u, run_experiment(cfg)))
    return tuple(out)


def _grid_failures(points, predicate) -> list[str]:
    bad = []
    for label, b, u, report in points:
        for row in report.rows:
            if row["status"] != "ok" or not predicate(row):
                bad.append(f"{label} B={b} U={u} trial={row['trial']} ({row['error'] or 'mismatch'})")
    return bad


def _missing_mnist_note() -> str:
    return "" if mnist_dir() is not False else "; MNIST leg skipped (no IDX files)"


def criterion1(quick=False) -> CriterionResult:
    points = grid(secure_agg.IDEAL, quick)
    bad = _grid_failures(points, lambda r: r["lnacc_all"] == 1.0 and r["lnacc_target_min"] == 1.0)
    n = sum(len(p[3].rows) for p in points)
    detail = f"{n - len(bad)}/{n} trials at 100% LnAcc-all and LnAcc-target" + _missing_mnist_note()
    if bad:
        detail += f"; first failure {bad[0]}"
    return CriterionResult(1, "exact label recovery", not bad, detail)


def criterion2(quick=False) -> CriterionResult:
    points = grid(secure_agg.IDEAL, quick)
    bad = _grid_failures(points, lambda r: r["max_b_err"] <= B_GRAD_TOL and r["max_int_dev"] <= INT_TOL)
    worst_b = max(max(p[3].values("max_b_err"), default=0.0) for p in points)
    worst_i = max(max(p[3].values("max_int_dev"), default=0.0) for p in points)
    detail = f"max |db err| {worst_b:.2e} (tol {B_GRAD_TOL:g}), max integer deviation {worst_i:.2e} (tol {INT_TOL:g})"
    if bad:
        detail += f"; {len(bad)} failing trials, first {bad[0]}"
    return CriterionResult(2, "disaggregation fidelity", not bad, detail)


# --------------------------------------------------------------------------
# finite differences


def fd_models(seed: int):
    rng = np.random.default_rng(seed)
    mlp = fcn3(12, 4, (8, 6), rng)
    cnn = cnn_bn((2, 6, 6), 4, channels=3, kernel=3, hidden=5, rng=rng)
    return (mlp, rng.standard_normal((7, 12)), rng.integers(0, 4, 7)), \
           (cnn, rng.standard_normal((7, 2, 6, 6)), rng.integers(0, 4, 7))


def finite_difference(model, x, labels, h=FD_STEP) -> GradientSet:
    """Central differences of the training loss for every scalar parameter."""
    layout = model.layout()
    flat = model.flat_params()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        lp = loss_and_gradients(_with_flat(model, layout, up), x, labels)[0]
        lm = loss_and_gradients(_with_flat(model, layout, down), x, labels)[0]
        fd[i] = (lp - lm) / (2 * h)
    return GradientSet.from_flat(layout, fd)


def _with_flat(model, layout, flat):
    g = GradientSet.from_flat(layout, flat)
    return type(model)(model.layers, g.grads, model.input_shape, model.state)


def relative_errors(analytic: GradientSet, numeric: GradientSet) -> list[float]:
    """Per-tensor ``|a - n| / max(|a|, |n|, FD_FLOOR)``.

    The floor keeps structurally zero gradients (a conv bias feeding batch
    norm) from turning finite-difference rounding noise into a ratio of 1.
    """
    out = []
    for ga, gn in zip(analytic.grads, numeric.grads):
        for name in ga:
            a, n = ga[name].ravel(), gn[name].ravel()
            scale = max(np.linalg.norm(a), np.linalg.norm(n), FD_FLOOR)
            out.append(float(np.linalg.norm(a - n) / scale))
    return out


def criterion3(quick=False) -> CriterionResult:
    draws = 5
    worst = 0.0
    for seed in range(draws):
        for model, x, y in fd_models(seed):
            _, grads = loss_and_gradients(model, x, y)
            worst = max(worst, max(relative_errors(grads, finite_difference(model, x, y))))
    return CriterionResult(3, "gradient correctness", worst <= FD_TOL,
                           f"worst per-tensor relative error {worst:.2e} over {draws} draws x 2 architectures (tol {FD_TOL:g})")


def criterion4(quick=False) -> CriterionResult:
    rng = np.random.default_rng(4)
    n1 = 100 if quick else 1000
    hits = 0
    for _ in range(n1):
        n_classes = int(rng.integers(2, 11))
        model = fcn3(6, n_classes, (5, 4), rng)
        label = int(rng.integers(0, n_classes))
        grads = backward(model, forward(model, rng.standard_normal((1, 6))), np.array([label]))
        try:
            hits += atk.prop1_single_sample(grads.fcl_bias) == label
        except atk.NotSingleSampleError:
            pass
    n2 = 20 if quick else 100
    exact = 0
    for _ in range(n2):
        b = int(rng.integers(1, 65))
        model = fcn3(6, 10, (5, 4), rng)
        labels = rng.integers(0, 10, b)
        trace = forward(model, rng.standard_normal((b, 6)))
        grads = backward(model, trace, labels)
        exact += np.array_equal(atk.prop2_counts(grads.fcl_bias, trace.logits, b), label_counts(labels, 10))
    ok = hits == n1 and exact == n2
    return CriterionResult(4, "single-sample and batch count oracles", ok,
                           f"sign rule {hits}/{n1}, batch counts {exact}/{n2}")


def criterion5(quick=False) -> CriterionResult:
    rng = np.random.default_rng(5)
    notes, ok = [], True
    bits = secure_agg.DEFAULT_BITS
    for u in (2, 5, 20):
        ids = tuple(int(i) for i in rng.choice(1000, u, replace=False))
        plan = secure_agg.MaskPlan(ids, int(rng.integers(2**32)))
        total = np.zeros(4096, dtype=np.uint64)
        for cid in ids:
            total += plan.client_mask(cid, 4096)
        cancel = not total.any()
        grads = [rng.uniform(-1, 1, 4096) for _ in ids]
        layout = ((("w", (4096,)),),)
        sets = [GradientSet.from_flat(layout, g) for g in grads]
        ups = [secure_agg.encode(g, plan, cid, secure_agg.MASKED, bits) for cid, g in zip(ids, sets)]
        decoded = secure_agg.aggregate_decode(ups, plan, layout).flatten()
        err = float(np.max(np.abs(decoded - np.sum(grads, axis=0))))
        bound = u / (2.0 * 2.0**bits)
        ok &= cancel and err <= bound
        notes.append(f"U={u} masks cancel={cancel} err={err:.2e}<={bound:.2e}")
    points = grid(secure_agg.MASKED, quick)
    bad = _grid_failures(points, lambda r: r["lnacc_all"] == 1.0 and r["lnacc_target_min"] == 1.0)
    n = sum(len(p[3].rows) for p in points)
    ok &= not bad
    notes.append(f"masked grid {n - len(bad)}/{n} at 100%" + _missing_mnist_note())
    if bad:
        notes.append(f"first failure {bad[0]}")
    return CriterionResult(5, "secure aggregation codec", ok, "; ".join(notes))


# --------------------------------------------------------------------------
# defenses, stealth, runtime, determinism


def defense_setup():
    """The default experiment: FCN-3 on MNIST, synthetic data when MNIST is absent."""
    path = mnist_dir()
    if path is False:
        return "synthetic/fcn3", ExperimentConfig()
    return "mnist/fcn3", ExperimentConfig(dataset=DatasetConfig(kind=MNIST, path=path))


def _non_increasing(vals) -> bool:
    return all(b <= a for a, b in zip(vals, vals[1:]))


def defense_curves(config: ExperimentConfig, trials: int):
    sig_vals = (0.0, 1e-4, 1e-3, 1e-2)
    th_vals = (0.0, 0.2, 0.4, 0.8)
    cfg = replace(config, trials=trials)
    sig = run_sweep(cfg, "sigma", sig_vals)
    th = run_sweep(replace(cfg, batch_size=16), "theta", th_vals)
    return ([sig.mean("lnacc_all", sigma=v) or 0.0 for v in sig_vals],
            [th.mean("lnacc_all", theta=v) or 0.0 for v in th_vals])


def criterion6(quick=False) -> CriterionResult:
    label, config = defense_setup()
    s, t = defense_curves(config, 4 if quick else GRID_TRIALS)
    checks = {
        "sigma<=1e-3 >= 0.9": min(s[:3]) >= 0.9,
        "sigma 1e-2 < 1e-3": s[3] < s[2],
        "theta 0.8 (B=16) >= 0.8": t[3] >= 0.8,
        "sigma curve non-increasing": _non_increasing(s),
        "theta curve non-increasing": _non_increasing(t),
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"{label}: sigma 0/1e-4/1e-3/1e-2 -> " + "/".join(f"{v:.3f}" for v in s)
              + "; theta 0/.2/.4/.8 -> " + "/".join(f"{v:.3f}" for v in t))
    if failed:
        detail += "; failed: " + ", ".join(failed)
    return CriterionResult(6, "defense trends", not failed, detail)


def criterion7(quick=False) -> CriterionResult:
    notes, ok = [], True
    for channels in (4, 64):
        base = cnn_bn((1, 8, 8), 10, channels=channels, rng=np.random.default_rng(channels))
        kits = atk.build_fishing_models(base, [0, 1], rng=0)
        nomp, ratio = nomp_ratio(kits[0].model, base)
        consistent = ratio == nomp / base.n_params
        ok &= nomp == 2 * channels and consistent
        notes.append(f"d={channels}: NoMP={nomp} Ratio={ratio:.5f}")
    cfg = ExperimentConfig(dataset=DatasetConfig(shape=(1, 8, 8)), model=ModelConfig(kind=CNN_BN),
                           trials=4 if quick else GRID_TRIALS)
    rep = run_experiment(cfg)
    cos = rep.mean("cossim_mean")
    ok &= cos is not None and cos > COSSIM_SMOKE
    notes.append(f"CNN-BN synthetic CosSim {cos:.3f} (smoke threshold > {COSSIM_SMOKE})")
    return CriterionResult(7, "stealthiness accounting", ok, "; ".join(notes))


def attack_wall_time(base: ExperimentConfig, batch_size: int, n_sel: int, repeats: int = 5) -> float:
    """Median wall time of fishing-model construction, one round and disaggregation."""
    data = load_dataset(base.dataset)
    rng = np.random.default_rng(8)
    model = fcn3(int(np.prod(data.samples.shape[1:])), data.n_classes, base.model.hidden, rng)
    parts = partition(data.samples.reshape(len(data), -1), data.labels, base.n_clients, data.n_classes, rng)
    state = FederationState(model, parts, data.n_classes)
    times = []
    for r in range(repeats):
        server = atk.FishingServer(seed=r)
        start = time.perf_counter()
        record = run_round(state, RoundConfig(n_sel, batch_size, seed=r), server)
        atk.run_attack(record, server.kits)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def _r2(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    tot = np.sum((y - y.mean()) ** 2)
    return 1.0 if tot == 0 else float(1 - np.sum(resid**2) / tot)


def criterion8(quick=False) -> CriterionResult:
    base = ExperimentConfig()
    bs, us = (64, 256, 1024), (2, 5, 10)
    repeats = 3 if quick else 7
    tb = [attack_wall_time(base, b, 5, repeats) for b in bs]
    tu = [attack_wall_time(base, 64, u, repeats) for u in us]
    mono = all(np.diff(tb) >= 0) and all(np.diff(tu) >= 0)
    r2b, r2u = _r2(bs, tb), _r2(us, tu)
    ok = mono and r2b >= R2_MIN and r2u >= R2_MIN
    detail = (f"B 64/256/1024 -> " + "/".join(f"{t * 1e3:.1f}ms" for t in tb) + f" (R2 {r2b:.3f}); "
              f"U 2/5/10 -> " + "/".join(f"{t * 1e3:.1f}ms" for t in tu) + f" (R2 {r2u:.3f})")
    return CriterionResult(8, "runtime scaling", ok, detail, warning=not ok)


DETERMINISM_CONFIG = """\
dataset:
  kind: synthetic
  n_classes: 10
  dim: 64
model:
  kind: fcn3
trials: {trials}
clients_per_round: 5
batch_size: 64
sa_mode: masked
defense:
  kind: gaussian_noise
  sigma: 1.0e-4
  seed: 3
seed: 11
"""


def criterion9(quick=False) -> CriterionResult:
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = tmp / "config.yaml"
        cfg.write_text(DETERMINISM_CONFIG.format(trials=2 if quick else 5))
        outs = []
        for k in range(2):
            out = tmp / f"run{k}.csv"
            with contextlib.redirect_stdout(io.StringIO()):
                main(["run", "--config", str(cfg), "--out", str(out)])
            outs.append(out.read_bytes())
    same = outs[0] == outs[1] and len(outs[0]) > 0
    return CriterionResult(9, "determinism", same, f"two CLI runs, CSV bodies identical: {same} ({len(outs[0])} bytes)")


CRITERIA = (criterion1, criterion2, criterion3, criterion4, criterion5, criterion6, criterion7, criterion8, criterion9)


def run_all(quick: bool = False, echo: bool = False) -> list[CriterionResult]:
    results = []
    for check in CRITERIA:
        res = check(quick)
        if echo:
            print(res.line(), flush=True)
        results.append(res)
    return results
