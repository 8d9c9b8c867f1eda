import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdepict.autodiff import ParamSet
from crossdepict.data import Example, MultiDomainDataset, SyntheticConfig, generate_synthetic
from crossdepict.evaluation import (LITERATURE_ROWS, METHODS, BenchmarkError, DomainShiftReport,
                                    EigenProjection, RunSettings, cell_seed, eigen_projection,
                                    evaluate_accuracy, kl_divergence, kl_domain_shift,
                                    literature_table, parse_report_tsv, run_benchmark, run_cell,
                                    select_best_model)
from crossdepict.model import ClassifierHead, FeatureNetSpec, Model, build_model, classify, forward
from crossdepict.trainers import Checkpoint, MetaRegConfig, profile_config


def _linear_model(W, b=None):
    """Identity relu feature layer over nonnegative inputs, then head (W, b)."""
    M, N = W.shape
    spec = FeatureNetSpec((M, M), "relu", 0)
    feats = ParamSet({"layer0.W": np.eye(M), "layer0.b": np.zeros(M)})
    return Model(spec, feats, ClassifierHead(W, np.zeros(N) if b is None else b, "trainable", 0))


def test_accuracy_perfect_and_constant():
    m = _linear_model(np.eye(3))
    x = np.eye(3)
    assert evaluate_accuracy(m, (x, np.array([0, 1, 2]))) == 100.0
    const = _linear_model(np.zeros((2, 2)), np.array([1.0, 0.0]))
    examples = [Example(np.array([0.5, 0.5]), k % 2, "d") for k in range(10)]
    assert evaluate_accuracy(const, examples) == 50.0


def test_accuracy_matches_recount():
    rng = np.random.default_rng(0)
    m = build_model(FeatureNetSpec((6, 10), "relu", 5), 4)
    x, y = rng.uniform(size=(57, 6)), rng.integers(0, 4, size=57)
    pred = classify(forward(m, x))
    recount = sum(int(pred[i] == y[i]) for i in range(57))
    assert evaluate_accuracy(m, (x, y)) == pytest.approx(100 * recount / 57)


def test_accuracy_empty():
    with pytest.raises(ValueError):
        evaluate_accuracy(_linear_model(np.eye(2)), [])


def _ckpt(step, acc):
    return Checkpoint(step, acc, ParamSet({}), f"d{step}")


def test_select_best_model():
    assert select_best_model([_ckpt(1, 60), _ckpt(2, 70), _ckpt(3, 65)]).step == 2
    assert select_best_model([_ckpt(1, 70), _ckpt(2, 70)]).step == 1
    with pytest.raises(ValueError):
        select_best_model([])


def test_literature_rows_and_flags():
    cells, printed = LITERATURE_ROWS["Ours"]
    assert f"{np.mean(cells):.2f}" == "69.98" and printed == 70.00
    table = literature_table()
    ours = next(line for line in table.splitlines() if line.startswith("Ours "))
    assert "69.98" in ours and "70.00" in ours and "differs" in ours
    full = next(line for line in table.splitlines() if line.startswith("Full AlexNet"))
    assert "differs" not in full


# ---------------------------------------------------------------------------
# benchmark harness on a very small problem

@pytest.fixture(scope="module")
def tiny():
    ds = generate_synthetic(SyntheticConfig(per_class=12, seed=1))
    settings_ = RunSettings(hidden=(24, 16), train=profile_config("desk", iterations=40, eval_interval=20),
                            metareg=MetaRegConfig(phase1_iterations=4, phase2_iterations=2))
    return ds, settings_


def test_benchmark_counts_runs(tiny, monkeypatch):
    ds, s = tiny
    import crossdepict.evaluation as ev
    calls = []
    real = ev.run_cell
    monkeypatch.setattr(ev, "run_cell", lambda *a, **k: calls.append(a[1:4]) or real(*a, **k))
    rep = run_benchmark(ds, ["baseline"], [0], s, held_out=["photo", "art"])
    assert len(calls) == 2 and len(rep.cells) == 2


def test_report_shape_and_averages(tiny):
    ds, s = tiny
    rep = run_benchmark(ds, ["baseline", "fixed-head"], [0], s)
    rows = parse_report_tsv(rep.to_tsv())
    assert list(rows) == ["baseline", "fixed-head"]
    for m, vals in rows.items():
        assert len(vals) == 5
        assert abs(np.mean(vals[:4]) - vals[4]) < 0.005
    text = rep.to_text().splitlines()
    assert text[0].split() == ["method", "photo", "art", "cartoon", "sketch", "average"]
    assert all(len(v.split(".")[-1]) == 2 for v in text[2].split()[1:])
    assert rep.metadata["seeds"] == (0,) and rep.metadata["config"] == s.digest()


def test_method_order_does_not_change_cells(tiny):
    ds, s = tiny
    fwd = run_benchmark(ds, ["baseline", "mldg", "fixed-orthogonal-head"], [2], s, held_out=["cartoon"])
    rev = run_benchmark(ds, ["fixed-orthogonal-head", "mldg", "baseline"], [2], s, held_out=["cartoon"])
    key = lambda c: (c.method, c.held_out, c.seed)
    assert {key(c): (c.test_accuracy, c.digest) for c in fwd.cells} == \
        {key(c): (c.test_accuracy, c.digest) for c in rev.cells}


def test_workers_do_not_change_output(tiny):
    ds, s = tiny
    a = run_benchmark(ds, ["baseline", "metareg"], [0], s, held_out=["sketch"], workers=1)
    b = run_benchmark(ds, ["baseline", "metareg"], [0], s, held_out=["sketch"], workers=2)
    assert a.to_tsv() == b.to_tsv() and a.cells_tsv() == b.cells_tsv()


def test_deployed_model_is_the_selected_checkpoint(tiny):
    ds, s = tiny
    cell, result, scenario = run_cell(ds, "baseline", "art", 0, s, return_result=True)
    best = select_best_model(result.checkpoints)
    assert cell.digest == best.digest and cell.best_step == best.step
    deployed = result.model.with_params(best.params)
    assert evaluate_accuracy(deployed, scenario.test()) == cell.test_accuracy
    assert scenario.audit["art"] == 0


def test_cell_seed_ignores_method():
    assert cell_seed(0, "photo") == cell_seed(0, "photo") != cell_seed(0, "art")


def test_benchmark_errors(tiny):
    ds, s = tiny
    with pytest.raises(BenchmarkError, match="unknown method"):
        run_benchmark(ds, ["nope"], [0], s)
    with pytest.raises(BenchmarkError, match="seed"):
        run_benchmark(ds, ["baseline"], [], s)
    one = MultiDomainDataset(ds.classes, {"photo": ds.features["photo"]}, {"photo": ds.labels["photo"]})
    with pytest.raises(BenchmarkError, match="2 domains"):
        run_benchmark(one, ["baseline"], [0], s)


def test_failed_run_names_its_cell(tiny):
    ds, _ = tiny
    bad = RunSettings(hidden=(3,), train=profile_config("desk", iterations=5, eval_interval=5))
    with pytest.raises(BenchmarkError, match="method=baseline held_out=photo seed=0"):
        run_benchmark(ds, ["baseline"], [0], bad, held_out=["photo"])


# ---------------------------------------------------------------------------
# KL

def test_kl_closed_form_and_asymmetry():
    p, q = [0.75, 0.25], [0.25, 0.75]
    assert kl_divergence(p, q) == pytest.approx(0.75 * np.log(3) + 0.25 * np.log(1 / 3), abs=1e-12)
    assert kl_divergence(p, q) == pytest.approx(0.549306144334, abs=1e-12)
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence([0.5, 0.3, 0.2], [0.2, 0.2, 0.6]) != kl_divergence([0.2, 0.2, 0.6], [0.5, 0.3, 0.2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=12), st.integers(0, 2**31))
def test_kl_nonnegative_on_smoothed_histograms(counts, seed):
    rng = np.random.default_rng(seed)
    p = np.asarray(counts, dtype=float) + 1
    q = rng.integers(0, 50, size=len(counts)) + 1.0
    assert kl_divergence(p / p.sum(), q / q.sum()) >= -1e-15


def test_identical_domains_have_zero_kl():
    ds = generate_synthetic(SyntheticConfig(per_class=10, domains=("photo",)))
    twin = MultiDomainDataset(ds.classes, {"a": ds.features["photo"], "b": ds.features["photo"]},
                              {"a": ds.labels["photo"], "b": ds.labels["photo"]})
    rep = kl_domain_shift(twin, bins=20)
    assert np.all(np.abs(rep.kl) <= 1e-12)


def test_kl_report_round_trip_and_diagonal(small_dataset):
    rep = kl_domain_shift(small_dataset)
    assert np.all(np.diag(rep.kl) == 0) and np.all(rep.kl >= 0)
    back = DomainShiftReport.from_tsv(rep.to_tsv())
    assert back.domains == rep.domains and np.array_equal(back.kl, rep.kl)
    np.testing.assert_allclose(back.edges, rep.edges, rtol=1e-15)


def test_kl_custom_statistic(small_dataset):
    def bright_fraction(x):
        return (x > 0.5).mean(axis=1)
    rep = kl_domain_shift(small_dataset, bins=10, statistic=bright_fraction)
    assert rep.statistic == "bright_fraction" and len(rep.edges) == 11


def test_kl_errors(small_dataset):
    with pytest.raises(ValueError):
        kl_domain_shift(small_dataset, bins=1)
    empty = MultiDomainDataset(("a", "b"), {"x": np.zeros((0, 2)), "y": np.ones((2, 2))},
                               {"x": np.zeros(0, dtype=int), "y": np.array([0, 1])})
    with pytest.raises(ValueError, match="empty"):
        kl_domain_shift(empty)


def test_sketch_has_largest_mean_kl():
    rep = kl_domain_shift(generate_synthetic(SyntheticConfig()))
    means = rep.mean_to_others()
    assert max(means, key=means.get) == "sketch"


# ---------------------------------------------------------------------------
# eigenprojection

def _ds(X, labels, domains):
    feats, labs = {}, {}
    for d in sorted(set(domains)):
        sel = np.asarray(domains) == d
        feats[d], labs[d] = X[sel], np.asarray(labels)[sel]
    return MultiDomainDataset(("c0", "c1"), feats, labs)


def test_planar_data_is_fully_captured():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(10, 2)))[0]
    X = rng.normal(size=(80, 2)) @ basis.T + 3.0
    proj = eigen_projection(_ds(X, np.arange(80) % 2, ["a", "b"] * 40))
    assert proj.explained.sum() >= 0.9999


def test_two_clusters_separate_on_first_component():
    rng = np.random.default_rng(1)
    X = np.zeros((40, 5))
    X[:20, 0] = -5
    X[20:, 0] = 5
    X += 0.01 * rng.normal(size=X.shape)
    labels = np.r_[np.zeros(20, int), np.ones(20, int)]
    proj = eigen_projection(_ds(X, labels, ["a"] * 40))
    centres = {c: (u, v) for c, _, u, v in proj.rows}
    assert abs(centres["c0"][0] - centres["c1"][0]) > 9
    assert abs(centres["c0"][1] - centres["c1"][1]) < 0.1


def test_projection_matches_covariance_eigen_oracle(small_dataset):
    proj = eigen_projection(small_dataset)
    X = np.concatenate([small_dataset.features[d] for d in small_dataset.domains])
    mu = X.mean(axis=0)
    w, V = np.linalg.eigh(np.cov(X - mu, rowvar=False))
    top = V[:, ::-1][:, :2]
    for c, d, u, v in proj.rows:
        k = small_dataset.classes.index(c)
        centre = small_dataset.features[d][small_dataset.labels[d] == k].mean(axis=0) - mu
        ref = centre @ top
        assert abs(abs(u) - abs(ref[0])) < 1e-8 and abs(abs(v) - abs(ref[1])) < 1e-8


def test_projection_rotation_invariant_up_to_sign(small_dataset):
    rng = np.random.default_rng(3)
    R = np.linalg.qr(rng.normal(size=(256, 256)))[0]
    rotated = MultiDomainDataset(small_dataset.classes,
                                 {d: small_dataset.features[d] @ R for d in small_dataset.domains},
                                 dict(small_dataset.labels))
    a = np.array([[u, v] for *_, u, v in eigen_projection(small_dataset).rows])
    b = np.array([[u, v] for *_, u, v in eigen_projection(rotated).rows])
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-8)


def test_projection_table_round_trip(small_dataset):
    proj = eigen_projection(small_dataset)
    assert EigenProjection.parse_tsv(proj.to_tsv()) == proj.rows
    assert len(proj.rows) == 7 * 4


def test_degenerate_dataset():
    X = np.ones((10, 4))
    with pytest.raises(ValueError, match="degenerate"):
        eigen_projection(_ds(X, np.arange(10) % 2, ["a"] * 10))
