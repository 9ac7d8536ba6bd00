"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

Run alone with ``pytest tests/test_acceptance.py -s -v``.  The training-based
criteria share one 500-segment synthetic dataset and a cache of trained
models, so the whole file takes roughly forty minutes on one CPU core.
"""
import time

import numpy as np
import pytest

import gstcn.autodiff as ad
from gstcn.autodiff import Tensor, grad_check
from gstcn.data import DatasetSplit, SceneSegment, hermite_fill, split_dataset
from gstcn.evaluation import (
    ExperimentSpec,
    bench_inference,
    desk_model_config,
    desk_train_config,
    evaluate,
    evaluate_cv,
    robustness_deltas,
)
from gstcn.graph import DISTANCE_FLOOR, build_weighted_adjacency, normalize_adjacency
from gstcn.harness import dense_scene, synthetic_dataset
from gstcn.model import (BiGaussianField, FieldTensors, GSTCN, ModelConfig, ablation_config, checkpoint_json,
                         make_batch)
from gstcn.training import TrainConfig, fit, load_params, nll_loss

SEEDS = (0, 1, 2)
LOG_2PI = 1.8378770664093453


def report(capsys, number, title, ok, detail, started):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} | {detail} | {time.perf_counter() - started:.1f}s"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def split():
    return split_dataset(synthetic_dataset(n_segments=500, seed=0), (0.7, 0.1, 0.2), seed=0)


@pytest.fixture(scope="module")
def trained(split):
    cache = {}

    def get(name, seed):
        key = (name, seed)
        if key not in cache:
            cfg = desk_model_config()
            if name == "ones":
                cfg = desk_model_config(adjacency_scheme="ones")
            elif name != "full":
                cfg = ablation_config(cfg, name[3:])
            model = GSTCN(cfg, seed=seed)
            best, _ = fit(model, split, desk_train_config(seed=seed))
            load_params(model, best)
            cache[key] = model
        return cache[key]

    return get


def smooth_scene(rng, n=3, past=5, future=4, dt=0.2):
    """Noisy constant-velocity tracks in nearby lanes."""
    t = np.arange(-past + 1, future + 1) * dt
    speed, y0, x0 = rng.uniform(5, 25, n), rng.uniform(-30, 30, n), rng.uniform(0, 10, n)
    x = np.broadcast_to(x0, (t.size, n)) + rng.normal(0, 0.3, (t.size, n))
    y = y0 + speed * t[:, None] + rng.normal(0, 0.3, (t.size, n))
    xy = np.stack([x, y])
    return SceneSegment(xy[:, :past].copy(), xy[:, past:].copy(), list(range(1, n + 1)), [1] * n)


def test_criterion_01_gradient_correctness(capsys):
    # tanh keeps the loss smooth; relu kinks within the difference step break any finite-difference oracle
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(past_len=5, future_len=4, embed_channels=8, gru_hidden=8, dropout=0.0, activation="tanh")
        model = GSTCN(cfg, seed=seed, dtype=np.float64)
        batch = make_batch([smooth_scene(rng)], cfg, np.float64)
        params = list(model.params.values())

        def loss():
            out = model.forward_batch(batch, training=False)
            return nll_loss(out, batch.truth, batch.mask)

        worst = max(worst, grad_check(loss, params, step=1e-4))
    report(capsys, 1, "end-to-end NLL gradient vs central differences", worst < 1e-4,
           f"max relative error {worst:.2e} over 20 seeds, {len(params)} tensors", t0)


def test_criterion_02_adjacency_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        a = rng.uniform(0, 3, (n, n))
        a = (a + a.T) / 2
        np.fill_diagonal(a, 0.0)
        a_hat = a + np.eye(n)
        lam = np.diag(1.0 / np.sqrt(a_hat.sum(axis=1)))
        worst = max(worst, float(np.max(np.abs(normalize_adjacency(a) - lam @ a_hat @ lam))))
    pos = rng.normal(0, 20, (2, 8))
    pos[:, 7] = pos[:, 6]                         # coincident pair exercises the floor
    d = np.sqrt(((pos[:, :, None] - pos[:, None, :]) ** 2).sum(axis=0))
    off = ~np.eye(8, dtype=bool)
    schemes_ok = (
        np.array_equal(build_weighted_adjacency(pos, "reciprocal")[off], (1.0 / np.maximum(d, DISTANCE_FLOOR))[off])
        and np.array_equal(build_weighted_adjacency(pos, "distance")[off], d[off])
        and np.array_equal(build_weighted_adjacency(pos, "ones")[off], np.ones(56))
    )
    report(capsys, 2, "normalized adjacency vs dense oracle; weight schemes", worst < 1e-12 and schemes_ok,
           f"max abs error {worst:.1e} over 1000 matrices; schemes exact={schemes_ok}", t0)


def test_criterion_03_loss_closed_forms(capsys):
    t0 = time.perf_counter()

    def one(mx, my, sx, sy, rho, tx, ty):
        f = BiGaussianField(*(np.array([[v]], dtype=np.float64) for v in (mx, my, sx, sy, rho)))
        return float(nll_loss(f, np.array([[[tx]], [[ty]]])).data)

    at_mean = one(0, 0, 1, 1, 0, 0, 0)
    offset = one(0, 0, 1, 1, 0, 1, 0)
    mu = Tensor(np.array([[0.3]]), requires_grad=True)
    nu = Tensor(np.array([[-1.2]]), requires_grad=True)
    ls = Tensor(np.array([[0.4]]))
    field = FieldTensors(mu, nu, ad.exp(ls), ad.exp(ls), Tensor(np.array([[0.5]])), ls, ls)
    nll_loss(field, np.array([[[0.3]], [[-1.2]]])).backward()
    grad = max(abs(float(mu.grad[0, 0])), abs(float(nu.grad[0, 0])))
    ok = abs(at_mean - LOG_2PI) < 1e-9 and abs(offset - LOG_2PI - 0.5) < 1e-9 and grad < 1e-8
    report(capsys, 3, "NLL closed forms and zero mean-gradient", ok,
           f"at mean {at_mean:.9f}, one sigma {offset:.9f}, |dL/dmu| {grad:.1e}", t0)


def test_criterion_04_overfit(capsys, split):
    t0 = time.perf_counter()
    segs = split.train[:10]
    model = GSTCN(desk_model_config(dropout=0.0), seed=0)
    cfg = desk_train_config(epochs=200, decay_every=64, batch_size=2, mean_warmup_epochs=50)
    best, rep = fit(model, DatasetSplit(segs, [], []), cfg)
    load_params(model, best)
    drop = rep.epochs[0].train_nll - rep.epochs[-1].train_nll
    sq, n = 0.0, 0
    for s, f in zip(segs, model.predict(segs)):
        sq += float(((f.mean[:, 4] - s.future[:, 4]) ** 2).sum())
        n += s.num_vehicles
    rmse = float(np.sqrt(sq / n))
    report(capsys, 4, "overfit 10 segments in 200 epochs", drop >= 2.0 and rmse < 0.3,
           f"train NLL {rep.epochs[0].train_nll:.2f} -> {rep.epochs[-1].train_nll:.2f} (drop {drop:.2f}); "
           f"1 s RMSE {rmse:.3f} m", t0)


def test_criterion_05_beats_constant_velocity(capsys, split, trained):
    t0 = time.perf_counter()
    ours = evaluate(trained("full", 0), split.test, ExperimentSpec())
    cv = evaluate_cv(split.test)
    a, b = float(np.mean(ours.values[2:])), float(np.mean(cv.values[2:]))
    report(capsys, 5, "GSTCN vs CV Kalman, mean RMSE over 3-5 s", a < b,
           f"GSTCN {np.round(ours.values, 2).tolist()} avg3-5 {a:.3f} m; CV {np.round(cv.values, 2).tolist()} "
           f"avg3-5 {b:.3f} m", t0)


def test_criterion_06_reciprocal_beats_ones(capsys, split, trained):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        r = evaluate(trained("full", seed), split.test, ExperimentSpec(seed=seed)).average
        o = evaluate(trained("ones", seed), split.test, ExperimentSpec(adjacency_scheme="ones", seed=seed)).average
        rows.append((seed, r, o))
    ok = all(r < o for _, r, o in rows)
    report(capsys, 6, "reciprocal adjacency < all-ones, 3 seeds", ok,
           "; ".join(f"seed {s}: {r:.3f} vs {o:.3f}" for s, r, o in rows), t0)


def test_criterion_07_full_model_beats_removals(capsys, split, trained):
    t0 = time.perf_counter()
    parts, ok = [], True
    for seed in SEEDS:
        full = evaluate(trained("full", seed), split.test, ExperimentSpec(seed=seed)).average
        cells = [f"full {full:.3f}"]
        for v in ("no_gcn", "no_tde", "no_gru"):
            avg = evaluate(trained(v, seed), split.test, ExperimentSpec(variant=v, seed=seed)).average
            ok &= full <= avg
            cells.append(f"{v} {avg:.3f}")
        parts.append(f"seed {seed}: " + ", ".join(cells))
    report(capsys, 7, "full model <= each module-removal variant, 3 seeds", ok, "; ".join(parts), t0)


def test_criterion_08_robustness_pattern(capsys, split, trained):
    t0 = time.perf_counter()
    out = robustness_deltas(trained("full", 0), split.test, seed=0)
    partial, total = out["partial"]["delta"][-1], out["total"]["delta"][-1]
    report(capsys, 8, "5 s RMSE increase: total vehicle loss > partial loss", total > partial,
           f"partial +{partial:.3f} m, total +{total:.3f} m", t0)


def test_criterion_09_permutation_equivariance(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = GSTCN(ModelConfig(), seed=0)
    scenes = synthetic_dataset(n_segments=100, seed=9)
    bad = 0
    for scene in scenes:
        perm = rng.permutation(scene.num_vehicles)
        shuffled = SceneSegment(scene.past[:, :, perm], scene.future[:, :, perm],
                               [scene.vehicle_ids[i] for i in perm], [scene.lane_ids[i] for i in perm])
        if not np.array_equal(model.forward(shuffled).as_array(), model.forward(scene).as_array()[:, perm]):
            bad += 1
    report(capsys, 9, "bit-exact vehicle-permutation equivariance", bad == 0,
           f"{100 - bad}/100 scenes identical", t0)


def test_criterion_10_determinism(capsys, split):
    t0 = time.perf_counter()
    small = DatasetSplit(split.train[:40], split.val[:10], split.test[:20])
    runs = []
    for _ in range(2):
        model = GSTCN(desk_model_config(), seed=5)
        best, rep = fit(model, small, desk_train_config(epochs=3, mean_warmup_epochs=1, seed=5))
        load_params(model, best)
        csv = evaluate(model, small.test, ExperimentSpec(seed=5, samples=5)).to_csv()
        runs.append((checkpoint_json(model, 5), rep.to_csv(timing=False), csv))
    same = [a == b for a, b in zip(*runs)]
    report(capsys, 10, "byte-identical checkpoint, train report and eval CSV", all(same),
           f"checkpoint {same[0]}, report {same[1]}, eval {same[2]}", t0)


def test_criterion_11_parameters_and_latency(capsys):
    t0 = time.perf_counter()
    model = GSTCN(ModelConfig(), seed=0)
    rep = bench_inference(model, [dense_scene(120, seed=0)], repetitions=10)
    ok = 25_000 <= rep.parameters <= 100_000 and rep.median_ms < 5.0
    report(capsys, 11, "parameter count and per-vehicle latency at N=120", ok,
           f"{rep.parameters} parameters; median {rep.median_ms:.3f} ms, p95 {rep.p95_ms:.3f} ms per vehicle", t0)


def test_criterion_12_hermite_exact_on_linear(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        t = np.arange(n, dtype=float) * 0.1
        v = rng.normal() + rng.normal() * t
        keep = rng.random(n) < 0.6
        keep[0] = keep[-1] = True
        if keep.sum() < 2:
            keep[1] = True
        filled = hermite_fill(t[keep], v[keep], t[~keep])
        if filled.size:
            worst = max(worst, float(np.max(np.abs(filled - v[~keep]))))
    report(capsys, 12, "Hermite fill exact on degree-1 tracks", worst < 1e-10,
           f"max error {worst:.1e} over 1000 random gap masks", t0)
