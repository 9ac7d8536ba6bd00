import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gstcn.data import DatasetSplit, SceneSegment
from gstcn.evaluation import (
    ExperimentSpec,
    HorizonRmse,
    SquaredErrorPool,
    bench_inference,
    best_of_k_rmse,
    best_of_k_sq,
    draw_samples,
    evaluate,
    evaluate_cv,
    experiment_manifest,
    horizon_rmse,
    horizon_step,
    location_indices,
    rmse_at,
    robustness_deltas,
    run_experiment,
    stratify_by_location,
)
from gstcn.harness import dense_scene, synthetic_dataset
from gstcn.model import BiGaussianField, GSTCN, ModelConfig
from gstcn.training import TrainConfig


def offsets(*pairs, F=25):
    preds = np.zeros((2, F, len(pairs)))
    for n, (dx, dy) in enumerate(pairs):
        preds[0, :, n], preds[1, :, n] = dx, dy
    return preds, np.zeros_like(preds)


def test_rmse_examples():
    assert rmse_at(*offsets((3, 4)), 1) == 5.0
    assert rmse_at(*offsets((1, 0), (0, 1)), 2) == 1.0
    assert rmse_at(*offsets((0, 0), (0, 0)), 5) == 0.0


def test_horizon_steps():
    assert [horizon_step(t) for t in (1, 2, 3, 4, 5)] == [4, 9, 14, 19, 24]
    with pytest.raises(ValueError):
        horizon_step(0.1)
    with pytest.raises(ValueError):
        rmse_at(*offsets((1, 1), F=10), 3)


errors = arrays(np.float64, (2, 25, 4), elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(errors, st.floats(-10, 10, allow_nan=False))
def test_rmse_scales_with_error(e, c):
    zero = np.zeros_like(e)
    for t in (1, 3, 5):
        assert abs(rmse_at(c * e, zero, t) - abs(c) * rmse_at(e, zero, t)) <= 1e-9 * (1 + abs(c) * rmse_at(e, zero, t))


@settings(max_examples=50, deadline=None)
@given(errors, st.permutations(range(4)))
def test_rmse_permutation_invariant(e, perm):
    zero = np.zeros_like(e)
    assert abs(rmse_at(e, zero, 4) - rmse_at(e[:, :, list(perm)], zero, 4)) <= 1e-12 * (1 + rmse_at(e, zero, 4))


def test_pool_is_root_of_pooled_mean():
    a, za = offsets((3, 4))
    b, zb = offsets((0, 0), (0, 0), (0, 0))
    pool = SquaredErrorPool()
    pool.add(a, za)
    pool.add(b, zb)
    assert pool.result().values == (2.5,) * 5
    with pytest.raises(ValueError):
        SquaredErrorPool().result()


def test_horizon_rmse_csv_and_average():
    r = HorizonRmse((0.5, 1.0, 1.5, 2.0, 2.5))
    assert r.average == 1.5
    assert r.at(3) == 1.5
    lines = r.to_csv().splitlines()
    assert lines[0] == "horizon_s,rmse_m" and lines[1] == "1,0.5" and lines[-1] == "average,1.5"
    with pytest.raises(ValueError):
        HorizonRmse((1.0, -1.0, 0, 0, 0))


# best of k

def random_field(rng, F=25, N=3, scale=1.0):
    return BiGaussianField(rng.standard_normal((F, N)), rng.standard_normal((F, N)),
                           scale * rng.uniform(0.5, 2, (F, N)), scale * rng.uniform(0.5, 2, (F, N)),
                           rng.uniform(-0.8, 0.8, (F, N)))


def test_best_of_one_with_tiny_sigma_is_mean_rmse():
    rng = np.random.default_rng(0)
    f = random_field(rng, scale=1e-12)
    truth = rng.standard_normal((2, 25, 3))
    np.testing.assert_allclose(best_of_k_rmse(f, truth, k=1).values, horizon_rmse(f.mean, truth).values, atol=1e-9)


def test_best_of_k_monotone_in_k():
    rng = np.random.default_rng(1)
    f = random_field(rng)
    truth = rng.standard_normal((2, 25, 3))
    prev = None
    for k in (1, 2, 5, 10):
        cur = np.array(best_of_k_rmse(f, truth, k=k, seed=4).values)
        if prev is not None:
            assert np.all(cur <= prev)
        prev = cur


def test_best_of_k_replays_the_seeded_draws():
    rng = np.random.default_rng(2)
    f = random_field(rng, N=2)
    truth = rng.standard_normal((2, 25, 2))
    samples = draw_samples(f, 5, seed=9)
    assert samples.shape == (5, 2, 25, 2)
    brute = [min(rmse_at(s, truth, t) for s in samples) for t in (1, 2, 3, 4, 5)]
    np.testing.assert_allclose(best_of_k_rmse(f, truth, k=5, seed=9).values, brute, rtol=1e-12)
    np.testing.assert_array_equal(best_of_k_sq(f, truth, 5, 9), best_of_k_sq(f, truth, 5, 9))


# location strata

def line_scene(ys):
    n = len(ys)
    past = np.zeros((2, 15, n))
    past[1] = np.asarray(ys, dtype=float)[None, :]
    return SceneSegment(past, np.zeros((2, 25, n)), list(range(n)), [1] * n)


def test_strata_examples():
    strata = stratify_by_location(line_scene([0.0, 80.0, -80.0, 20.0]))
    assert list(strata["front"]) == [1]
    assert list(strata["rear"]) == [2]
    assert list(strata["middle"]) == [0, 3]
    assert list(location_indices(line_scene([0.0, 80.0]), "center")) == [0]


def test_uniform_line_gives_three_nonempty_strata():
    strata = stratify_by_location(line_scene([0.0] + list(np.linspace(-100, 100, 21))))
    assert all(len(v) for v in strata.values())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20))
def test_strata_partition_vehicles(ys):
    strata = stratify_by_location(line_scene(ys))
    everything = np.concatenate(list(strata.values()))
    assert sorted(everything.tolist()) == list(range(len(ys)))


# experiment plumbing

def test_spec_validation_and_round_trip():
    for bad in ({"variant": "w/o head"}, {"adjacency_scheme": "cos"}, {"robustness": "case3"},
                {"location": "left"}, {"samples": -1}):
        with pytest.raises(ValueError):
            ExperimentSpec(**bad)
    spec = ExperimentSpec(variant="no_tde", adjacency_scheme="ones", samples=5, seed=3)
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
    cfg = spec.model_config()
    assert cfg.variant == "no_tde" and cfg.adjacency_scheme == "ones"


@pytest.fixture(scope="module")
def small_split():
    segs = synthetic_dataset(n_segments=12, seed=5)
    return DatasetSplit(segs[:6], segs[6:8], segs[8:])


def test_run_experiment_is_deterministic(small_split):
    mc = ModelConfig(embed_channels=8, gru_hidden=8, output_anchor="cv")
    tc = TrainConfig(epochs=2, batch_size=3, optimizer="adam", lr0=1e-3, mean_warmup_epochs=1)
    spec = ExperimentSpec(seed=1)
    a = run_experiment(spec, small_split, mc, tc)
    b = run_experiment(spec, small_split, mc, tc)
    assert a.rmse.to_csv() == b.rmse.to_csv()
    m1 = experiment_manifest(spec, mc, tc, a.rmse)
    m2 = experiment_manifest(spec, mc, tc, b.rmse)
    assert m1 == m2 and len(m1["config_hash"]) == 40


def test_location_and_sample_scoring_run(small_split):
    model = GSTCN(ModelConfig(output_anchor="cv"), seed=0)
    for loc in ("all", "center", "middle"):
        r = evaluate(model, small_split.test, ExperimentSpec(location=loc, samples=5))
        assert all(v >= 0 for v in r.values)
    cv = evaluate_cv(small_split.test)
    assert cv.values[0] < cv.values[-1]


def test_robustness_deltas_report_both_cases(small_split):
    model = GSTCN(ModelConfig(output_anchor="cv"), seed=0)
    out = robustness_deltas(model, small_split.test, seed=0)
    for case in ("partial", "total"):
        d = out[case]
        np.testing.assert_allclose(d["delta"], np.subtract(d["degraded"].values, d["perfect"].values))


# latency

def test_bench_rejects_empty_input():
    with pytest.raises(ValueError):
        bench_inference(GSTCN(ModelConfig()), [])


def test_bench_reports_parameters_and_amortizes():
    model = GSTCN(ModelConfig())
    small = bench_inference(model, [dense_scene(30, seed=1)], repetitions=5)
    large = bench_inference(model, [dense_scene(60, seed=1)], repetitions=5)
    assert small.parameters == model.num_parameters()
    assert large.median_ms < 2 * small.median_ms
    assert set(small.to_dict()) == {"parameters", "vehicles", "repetitions", "mean_ms", "median_ms", "p95_ms"}
