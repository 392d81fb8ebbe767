import csv
import io
import math

import numpy as np
import pytest

from silentab.baselines import method2, UsabPolicy
from silentab.core import write_triples_csv
from silentab.em import EmInit, fit_em
from silentab.simulate import (ESTIMATORS, KAB, SAB, SimConfig, gen_dataset, misclassified_labels,
                               run_accuracy_benchmark, run_robustness, run_sensitivity,
                               table_ec3_grid, write_benchmark_csv, write_plot_data)


def csv_bytes(ds):
    buf = io.StringIO()
    write_triples_csv(ds, buf)
    return buf.getvalue()


@pytest.mark.parametrize("coupled", [False, True])
@pytest.mark.parametrize("q", [0.9, 0.5, 0.1])
def test_sab_share_matches_formula(q, coupled):
    cfg = SimConfig(4, 10, q, n=50_000, p_sr1=0.2, sr1_coupled=coupled)
    sample = gen_dataset(cfg, 3)
    p = cfg.p_sab
    sd = math.sqrt(p * (1 - p) / cfg.n)
    assert abs(sample.sab.mean() - p) <= 3 * sd
    if q == 0.9:
        assert p == pytest.approx(4 / 14 * 0.1)
        assert round(p, 2) == 0.03


def test_q_one_has_no_silent_abandonment():
    sample = gen_dataset(SimConfig(4, 10, 1.0, n=5000), 1)
    assert not sample.sab.any()
    assert not gen_dataset(SimConfig(4, 10, 1.0, n=5000, sr1_coupled=True), 1).sab.any()


def test_symmetric_rates_abandon_half():
    sample = gen_dataset(SimConfig(5, 5, 0.0, n=100_000), 2)
    share = np.mean((sample.true_class == SAB) | (sample.true_class == KAB))
    assert share == pytest.approx(0.5, abs=3 * math.sqrt(0.25 / 100_000))
    assert not np.any(sample.true_class == KAB)


def test_triples_follow_classes():
    sample = gen_dataset(SimConfig(4, 10, 0.5, n=3000, p_sr1=0.3), 4)
    ds, cls = sample.dataset, sample.true_class
    np.testing.assert_allclose(ds.u[cls == KAB], sample.tau[cls == KAB] * 1.0)
    np.testing.assert_allclose(ds.u[cls != KAB], sample.w[cls != KAB])
    assert np.all(ds.m[cls == SAB] == 0)
    assert np.all(ds.m[cls == KAB] == 2)
    assert np.all(sample.tau[cls == SAB] <= sample.w[cls == SAB])


def test_sr1_rate():
    cfg = SimConfig(4, 10, 0.5, n=40_000, p_sr1=0.3)
    sample = gen_dataset(cfg, 5)
    served = ~((sample.true_class == SAB) | (sample.true_class == KAB))
    assert sample.sr1[served].mean() == pytest.approx(0.3, abs=0.015)
    coupled = gen_dataset(SimConfig(4, 10, 0.7, n=40_000, sr1_coupled=True), 5)
    assert coupled.sr1[~((coupled.true_class == SAB) | (coupled.true_class == KAB))].mean() == \
        pytest.approx(0.3, abs=0.015)


def test_deterministic_bytes():
    cfg = SimConfig(4, 10, 0.5, n=500, seed=11)
    assert csv_bytes(gen_dataset(cfg).dataset) == csv_bytes(gen_dataset(cfg).dataset)
    assert csv_bytes(gen_dataset(cfg).dataset) != csv_bytes(gen_dataset(cfg, 12).dataset)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0, 1, 0.5)
    with pytest.raises(ValueError):
        SimConfig(1, 1, 1.5)
    with pytest.raises(ValueError):
        SimConfig(1, 1, 0.5, n=0)


def test_misclassification_rates():
    rng = np.random.default_rng(0)
    sample = gen_dataset(SimConfig(4, 10, 0.3, n=60_000, sr1_coupled=True), rng)
    labels = misclassified_labels(sample, rng)
    assert labels[sample.sab].mean() == pytest.approx(0.85, abs=0.01)
    assert 1 - labels[sample.sr1].mean() == pytest.approx(0.76, abs=0.01)
    perfect = misclassified_labels(sample, rng, 1.0, 1.0)
    np.testing.assert_array_equal(perfect, sample.sab)


def test_grid_layout():
    grid = table_ec3_grid()
    assert len(grid) == 14
    assert [c.q for c in grid[:10]] == [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
    assert [c.gamma for c in grid[10:]] == [9.0, 7.0, 5.0, 4.1]
    # Published P(Sab) column; its two-decimal entries are sometimes truncated.
    published = [0, .03, .05, .08, .11, .14, .17, .2, .22, .25, .27, .32, .4, .44]
    got = [c.theta / (c.theta + c.gamma) * (1 - c.q) for c in grid]
    np.testing.assert_allclose([c.p_sab for c in grid], got)
    np.testing.assert_allclose(got, published, atol=0.01)


def test_benchmark_job_independent_and_outputs(tmp_path):
    grid = table_ec3_grid(n=300, samples=4, seed=3)[4:6]
    a = run_accuracy_benchmark(grid, samples=4)
    b = run_accuracy_benchmark(grid, samples=4, jobs=2)
    assert [r.flat() for r in a] == [r.flat() for r in b]
    assert len(a) == 2 * len(ESTIMATORS)
    write_benchmark_csv(a, tmp_path / "t.csv")
    write_plot_data(a, tmp_path / "p.csv")
    with open(tmp_path / "p.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["p_sab", "estimator", "mse_theta", "mse_gamma", "mse_q"]
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert {r["estimator"] for r in rows} == set(ESTIMATORS)
    with pytest.raises(ValueError):
        run_accuracy_benchmark(grid, estimators=["nope"])


def test_q_one_cell_all_estimators_agree():
    rows = run_accuracy_benchmark(table_ec3_grid(samples=20)[:1], samples=20)
    mean = {r.estimator: r.theta.mean for r in rows}
    # No M=0 rows: Method 1 is the EM limit; Method 2 differs by sampling noise.
    assert mean["M1-Sr"] == pytest.approx(mean["EM"], rel=1e-9)
    assert mean["M1-Ab"] == pytest.approx(mean["EM"], rel=1e-9)
    for name in ("M2-Sr", "M2-Sab", "M2-SVM"):
        assert mean[name] == pytest.approx(mean["EM"], abs=0.1)


def test_reconciled_q03_served_baseline():
    # The 0.73 entry corresponds to our Method 2 as_served (M1/M2 labels swapped).
    grid = [table_ec3_grid()[7]]
    assert grid[0].q == 0.3
    (row,) = run_accuracy_benchmark(grid, estimators=["M2-Sr"], samples=100)
    assert row.theta.mean == pytest.approx(0.73, abs=0.03)


def test_bias_ordering_reconciled():
    # Published ordering M1-Sr < M2-SVM < EM < M2-Sab, read with the labels swapped.
    grid = table_ec3_grid(samples=30)[1:10:2]
    rows = run_accuracy_benchmark(grid, samples=30)
    for cell in grid:
        mean = {r.estimator: r.theta.mean for r in rows if r.config == cell}
        assert mean["M2-Sr"] < mean["M2-SVM"] < mean["EM"] < mean["M1-Ab"], cell.label()


class TestSensitivity:
    def test_variants_agree(self):
        cfg = SimConfig(4, 10, 0.5, n=2000, replications=10, sr1_coupled=True, seed=2)
        res = run_sensitivity(cfg)
        assert set(res.means) == {"all-sab", "all-sr", "half", "classifier"}
        assert res.theta_spread < 0.05
        a, b = res.per_sample["all-sab"][:, 0], res.per_sample["all-sr"][:, 0]
        np.testing.assert_allclose(a, b, atol=1e-3)

    def test_perfect_classifier_is_truth_init(self):
        cfg = SimConfig(4, 10, 0.5, n=2000, sr1_coupled=True, seed=4)
        res = run_sensitivity(cfg, ["classifier"], samples=1, sensitivity=1.0, specificity=1.0)
        ss = np.random.SeedSequence(4, spawn_key=(0,))
        data_rng, _ = (np.random.default_rng(s) for s in ss.spawn(2))
        sample = gen_dataset(cfg, data_rng)
        truth = fit_em(sample.dataset, EmInit.from_scores(sample.sab.astype(float)))
        assert res.per_sample["classifier"][0, 0] == pytest.approx(truth.theta * 60)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            run_sensitivity(SimConfig(4, 10, 0.5), ["nope"], samples=1)


class TestRobustness:
    def test_splits_within_three_sd(self):
        ds = gen_dataset(SimConfig(4, 10, 0.5, n=30_000, sr1_coupled=True), 8).dataset
        res = run_robustness(ds, 10, seed=1)
        assert res.max_theta_z() <= 3.0
        assert sum(res.sizes) == ds.n

    def test_single_split_is_full_fit(self):
        ds = gen_dataset(SimConfig(4, 10, 0.5, n=2000), 8).dataset
        res = run_robustness(ds, 1, seed=1)
        np.testing.assert_allclose(res.splits[0], res.full)

    def test_undersized(self):
        ds = gen_dataset(SimConfig(4, 10, 0.5, n=5), 8).dataset
        with pytest.raises(ValueError):
            run_robustness(ds, 10)
        with pytest.raises(ValueError):
            run_robustness(ds, 0)


def test_svm_labels_feed_method2():
    rng = np.random.default_rng(1)
    sample = gen_dataset(SimConfig(4, 10, 0.5, n=2000, sr1_coupled=True), rng)
    exact = method2(sample.dataset, UsabPolicy.from_labels(sample.sab))
    noisy = method2(sample.dataset, UsabPolicy.from_labels(misclassified_labels(sample, rng)))
    assert exact.theta * 60 == pytest.approx(4.0, abs=0.6)
    assert noisy.theta < exact.theta + 1.0
