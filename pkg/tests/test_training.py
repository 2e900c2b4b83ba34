"""Tests for metrics, the SGD training loop, evaluation, and the tuner."""

import csv
import math

import numpy as np
import pytest

from doprec import kernels as K
from doprec import models as M
from doprec import training as T
from doprec.datagen import Dataset, DatasetRecord
from doprec.device import DopingSpec

from oracles import nearest_rank_percentile


def make_dataset(u_matrix, c_matrix, c0=1e16, role="train"):
    """Wrap (n, N) signal/doping matrices as a Dataset fixture."""
    u_matrix = np.asarray(u_matrix, float)
    c_matrix = np.asarray(c_matrix, float)
    n, count = u_matrix.shape
    spec = DopingSpec(c0=c0, amplitudes=(), wavelengths_um=())
    records = tuple(
        DatasetRecord(u=u_matrix[:, j], doping=c_matrix[:, j], spec=spec)
        for j in range(count))
    return Dataset(records=records, positions_um=np.linspace(0.0, 200.0, n),
                   tag="clean", role=role)


class AffineProbe:
    """Minimal trainable model: one dense layer, no activation.

    With offset set, the layer starts as the constant map x -> offset,
    which pins the validation error for scheduler tests.
    """

    kind = "affine"

    def __init__(self, n, rng=None, offset=None):
        rng = rng or np.random.default_rng(0)
        self.n = n
        self.standardization = np.array([0.0, 1.0, 0.0, 1.0])
        self.store = K.ParamStore()
        if offset is not None:
            weight = np.zeros((n, n))
            bias = np.full(n, float(offset))
        else:
            weight = K.uniform_init(rng, (n, n), n)
            bias = np.zeros(n)
        self.w = self.store.tensor("weight", weight)
        self.b = self.store.tensor("bias", bias)

    def forward(self, x, mode="eval", tape=None):
        del mode
        return K.affine(K.Tensor(x), self.w, self.b, tape)


# ---------------------------------------------------------------------------
# metrics


def test_msel_zero_and_unit_cases():
    target = np.zeros((4, 1))
    assert T.msel(target, target) == 0.0
    pred = target.copy()
    pred[0, 0] = 1.0  # single record off by a unit basis vector
    assert T.msel(pred, target) == 1.0


def test_msel_matches_loop_oracle():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(7, 9))
    target = rng.normal(size=(7, 9))
    by_loop = sum(
        float(np.sum((pred[:, j] - target[:, j]) ** 2)) for j in range(9)
    ) / 9
    assert abs(T.msel(pred, target) - by_loop) <= 1e-12 * by_loop


def test_msel_shape_mismatch():
    with pytest.raises(K.ShapeMismatch):
        T.msel(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(K.ShapeMismatch):
        T.msel(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_test_error_basics():
    target = np.zeros((5, 2))
    assert T.test_error(target, target) == 0.0
    pred = target.copy()
    pred[3, 1] = 0.25  # one record off by 0.25 in one component
    assert T.test_error(pred, target) == pytest.approx(0.125)
    assert T.test_error(pred, target, c0=0.5) == pytest.approx(0.25)


def test_test_error_matches_loop_oracle():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(6, 11))
    target = rng.normal(size=(6, 11))
    by_loop = sum(
        float(np.max(np.abs(pred[:, j] - target[:, j]))) for j in range(11)
    ) / 11
    assert abs(T.test_error(pred, target) - by_loop) <= 1e-12 * by_loop


def test_remove_mean_properties():
    assert np.allclose(T.remove_mean(np.full(6, 3.5)), 0.0)
    rng = np.random.default_rng(2)
    vec = rng.normal(size=9)
    once = T.remove_mean(vec)
    assert abs(once.mean()) <= 1e-15
    assert np.allclose(T.remove_mean(once), once)
    mat = rng.normal(size=(5, 4))
    centered = T.remove_mean(mat)
    assert np.abs(centered.mean(axis=0)).max() <= 1e-15


def test_remove_mean_triangle_bound_on_test_error():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(8, 20))
    target = rng.normal(size=(8, 20))
    plain = np.max(np.abs(pred - target), axis=0)
    removed = np.max(np.abs(T.remove_mean(pred) - T.remove_mean(target)),
                     axis=0)
    mean_gap = np.abs(pred.mean(axis=0) - target.mean(axis=0))
    assert np.all(removed <= plain + 2.0 * mean_gap + 1e-15)


def test_nearest_rank_hand_values_and_oracle():
    values = np.array([3.0, 1.0, 4.0, 2.0])
    assert T.nearest_rank(values, 25.0) == 1.0
    assert T.nearest_rank(values, 50.0) == 2.0
    assert T.nearest_rank(values, 75.0) == 3.0
    assert T.nearest_rank(values, 100.0) == 4.0
    rng = np.random.default_rng(4)
    sample = rng.normal(size=37)
    for p in (10.0, 25.0, 50.0, 75.0, 90.0):
        assert T.nearest_rank(sample, p) == \
            nearest_rank_percentile(sample, p / 100.0)


def test_msel_loss_matches_metric_and_hand_gradient():
    rng = np.random.default_rng(5)
    pred_rows = rng.normal(size=(6, 4))
    target_rows = rng.normal(size=(6, 4))
    pred = K.Tensor(pred_rows)
    tape = K.Tape()
    loss = T.msel_loss(pred, target_rows, tape)
    # rows here are records; the public metric takes record columns
    assert float(loss.values) == pytest.approx(
        T.msel(pred_rows.T, target_rows.T), rel=1e-14)
    K.backward(tape, loss)
    hand = 2.0 / 6 * (pred_rows - target_rows)
    assert np.abs(pred.grad - hand).max() <= 1e-14


def test_standardize_constants():
    rng = np.random.default_rng(6)
    u = rng.normal(loc=2.0, scale=3.0, size=(5, 8))
    c = rng.normal(loc=-1.0, scale=0.5, size=(5, 8))
    data = make_dataset(u, c)
    consts = T.standardize_constants(data)
    assert consts[0] == pytest.approx(u.mean(), rel=1e-14)
    assert consts[1] == pytest.approx(u.std(), rel=1e-14)
    assert consts[2] == pytest.approx(c.mean(), rel=1e-14)
    assert consts[3] == pytest.approx(c.std(), rel=1e-14)
    flat = make_dataset(np.ones((4, 3)), np.zeros((4, 3)))
    consts = T.standardize_constants(flat)
    assert consts[1] == 1.0 and consts[3] == 1.0  # zero spread falls back


def test_options_validation():
    with pytest.raises(M.InvalidConfig):
        T.TrainOptions(lr=0.0)
    with pytest.raises(M.InvalidConfig):
        T.TrainOptions(lr=0.1, batch_size=0)
    with pytest.raises(M.InvalidConfig):
        T.TrainOptions(lr=0.1, epochs=4, rung_epochs=(3, 2))
    with pytest.raises(M.InvalidConfig):
        T.TrainOptions(lr=0.1, epochs=4, rung_epochs=(2, 8))
    with pytest.raises(M.InvalidConfig):
        T.TrainOptions(lr=0.1, clip_norm=0.0)
    with pytest.raises(M.InvalidConfig):
        T.TunerSpec(budget=0, rungs=(1,))
    with pytest.raises(M.InvalidConfig):
        T.TunerSpec(budget=2, rungs=(2, 2))
    with pytest.raises(M.InvalidConfig):
        T.TunerSpec(budget=2, rungs=(1, 2), reduction_factor=1)


# ---------------------------------------------------------------------------
# training loop


def linear_task(n=6, count=32, noise=0.05, seed=7):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, count))
    a0 = rng.normal(size=(n, n)) / math.sqrt(n)
    c = a0 @ u + noise * rng.normal(size=(n, count))
    return make_dataset(u, c, c0=1.0)


def test_train_tiny_lr_leaves_parameters():
    data = linear_task()
    model = AffineProbe(6, np.random.default_rng(8))
    before = {k: t.values.copy() for k, t in model.store.params.items()}
    T.train(model, data, T.TrainOptions(lr=1e-12, epochs=1))
    for name, old in before.items():
        new = model.store.params[name].values
        scale = np.abs(old).max() + 1.0
        assert np.abs(new - old).max() <= 1e-6 * scale


def test_train_reaches_least_squares_optimum():
    data = linear_task()
    model = AffineProbe(6, np.random.default_rng(9))
    opts = T.TrainOptions(lr=0.1, batch_size=64, epochs=800, seed=1)
    _, trace = T.train(model, data, opts)

    consts = T.standardize_constants(data)
    x = (np.stack([r.u for r in data.records]) - consts[0]) / consts[1]
    y = (np.stack([r.doping for r in data.records]) - consts[2]) / consts[3]
    aug = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(aug, y, rcond=None)
    optimum = float(np.mean(np.sum((aug @ coef - y) ** 2, axis=1)))
    assert trace[-1] <= 1.05 * optimum
    assert trace[-1] >= optimum - 1e-9


def test_train_full_batch_descent_is_monotone():
    data = linear_task()
    model = AffineProbe(6, np.random.default_rng(10))
    _, trace = T.train(model, data,
                       T.TrainOptions(lr=0.05, batch_size=64, epochs=100))
    diffs = np.diff(np.asarray(trace))
    assert np.all(diffs <= 1e-12 * max(1.0, trace[0]))


def test_train_is_bit_reproducible():
    data = linear_task()
    runs = []
    for _ in range(2):
        model = M.build_mlp((8, 8, 8, 8, 8, 8), n=6,
                            rng=np.random.default_rng(11))
        _, trace = T.train(model, data,
                           T.TrainOptions(lr=0.05, batch_size=8, epochs=5,
                                          seed=3))
        runs.append((trace, {k: t.values.copy()
                             for k, t in model.store.params.items()}))
    assert runs[0][0] == runs[1][0]
    for name, values in runs[0][1].items():
        assert np.array_equal(values, runs[1][1][name])
    model = M.build_mlp((8, 8, 8, 8, 8, 8), n=6,
                        rng=np.random.default_rng(11))
    _, other = T.train(model, data,
                       T.TrainOptions(lr=0.05, batch_size=8, epochs=5,
                                      seed=4))
    assert other != runs[0][0]  # shuffle seed matters


def test_train_sets_standardization_from_training_set():
    data = linear_task()
    model = AffineProbe(6)
    T.train(model, data, T.TrainOptions(lr=1e-6, epochs=1))
    assert np.array_equal(model.standardization,
                          T.standardize_constants(data))


def test_train_rung_callback_and_early_stop():
    data = linear_task()
    model = AffineProbe(6, np.random.default_rng(12))
    calls = []

    def callback(epoch, score):
        calls.append((epoch, score))
        return epoch < 4

    _, trace = T.train(model, data,
                       T.TrainOptions(lr=0.05, batch_size=64, epochs=8,
                                      rung_epochs=(2, 4, 6)),
                       rung_callback=callback)
    assert [e for e, _ in calls] == [2, 4]
    assert all(math.isfinite(s) and s >= 0.0 for _, s in calls)
    assert len(trace) == 4  # stopped at the second rung


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_raises_non_finite_loss():
    data = linear_task()
    model = AffineProbe(6, np.random.default_rng(13))
    with pytest.raises(T.NonFiniteLoss) as excinfo:
        T.train(model, data, T.TrainOptions(lr=1e12, epochs=50))
    assert isinstance(excinfo.value.trace, list)
    assert len(excinfo.value.trace) < 50


def test_train_skips_singleton_trailing_batch():
    # 5 records with batch 2 leave a 1-record tail, which train-mode batch
    # normalization cannot digest; the loop must drop it
    rng = np.random.default_rng(14)
    data = make_dataset(rng.normal(size=(24, 5)), rng.normal(size=(24, 5)),
                        c0=1.0)
    cfg = M.ResNetConfig(gate_kernel=3, gate_channels=8, gate_stride=1,
                         block_type="basic", block_count=1, downsample=True,
                         decoder=(20,))
    model = M.build_resnet(cfg, n=24, rng=rng)
    _, trace = T.train(model, data,
                       T.TrainOptions(lr=1e-3, batch_size=2, epochs=2))
    assert len(trace) == 2
    assert all(math.isfinite(v) for v in trace)


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_perfect_predictor():
    rng = np.random.default_rng(15)
    u = rng.normal(size=(6, 5))
    data = make_dataset(u, u, c0=1.0, role="test")
    report = T.evaluate(M.LinearModel(matrix=np.eye(6)), data)
    for summary in (report.with_mean, report.mean_removed):
        assert np.all(summary.errors == 0.0)
        assert summary.mean == summary.p25 == summary.p50 == summary.p75 == 0


def test_evaluate_hand_built_percentiles():
    n = 8
    c = np.zeros((n, 4))
    u = c.copy()
    deltas = np.array([0.01, 0.02, 0.03, 0.04])
    u[0, :] = deltas  # identity model: per-record error = delta / c0
    data = make_dataset(u, c, c0=1.0, role="test")
    report = T.evaluate(M.LinearModel(matrix=np.eye(n)), data)
    assert np.allclose(report.with_mean.errors, deltas)
    assert report.with_mean.mean == pytest.approx(0.025)
    assert report.with_mean.p25 == pytest.approx(0.01)
    assert report.with_mean.p50 == pytest.approx(0.02)
    assert report.with_mean.p75 == pytest.approx(0.03)
    # removing the mean scales each error by (1 - 1/n)
    assert np.allclose(report.mean_removed.errors, deltas * (1 - 1 / n))
    assert report.p25 <= report.p50 <= report.p75


def test_evaluate_mean_removal_helps_on_shifted_predictions():
    rng = np.random.default_rng(16)
    c = rng.normal(size=(10, 12))
    shifts = rng.uniform(0.5, 1.5, size=12)
    u = c + shifts  # constant per-record offset
    data = make_dataset(u, c, c0=1.0, role="test")
    report = T.evaluate(M.LinearModel(matrix=np.eye(10)), data)
    assert report.with_mean.mean > report.mean_removed.mean
    assert report.mean_removed.mean <= 1e-12  # shift is exactly removed


def test_evaluate_selected_variant_flag():
    rng = np.random.default_rng(17)
    u = rng.normal(size=(5, 6))
    c = rng.normal(size=(5, 6))
    data = make_dataset(u, c, c0=1.0, role="test")
    model = M.LinearModel(matrix=np.eye(5))
    plain = T.evaluate(model, data, mean_removed=False)
    removed = T.evaluate(model, data, mean_removed=True)
    assert plain.mean == plain.with_mean.mean
    assert removed.mean == removed.mean_removed.mean
    assert plain.with_mean.mean == removed.with_mean.mean


def test_evaluate_empty_dataset_rejected():
    data = make_dataset(np.zeros((4, 1)), np.zeros((4, 1)))
    empty = Dataset(records=(), positions_um=data.positions_um,
                    tag="clean", role="test")
    with pytest.raises(ValueError):
        T.evaluate(M.LinearModel(matrix=np.eye(4)), empty)


# ---------------------------------------------------------------------------
# tuner


def tuning_fixture(count=24, n=10, seed=18):
    rng = np.random.default_rng(seed)
    c = 1.0 + 0.05 * rng.normal(size=(n, count))
    u = rng.normal(size=(n, count))
    train_set = make_dataset(u[:, : count // 2], c[:, : count // 2], c0=1.0)
    val_set = make_dataset(u[:, count // 2:], c[:, count // 2:], c0=1.0,
                           role="validation")
    return train_set, val_set


def offset_sampler(offsets):
    """Trials whose validation error is controlled by a constant offset."""
    state = {"i": 0}

    def sampler(rng):
        del rng
        offset = offsets[state["i"] % len(offsets)]
        state["i"] += 1
        model = AffineProbe(10, offset=offset)
        return model, T.TrainOptions(lr=1e-12, batch_size=64, epochs=1)

    return sampler


def test_tune_budget_one_trains_to_final_rung():
    train_set, val_set = tuning_fixture()
    spec = T.TunerSpec(budget=1, rungs=(1, 2, 3), seed=0)
    best, leaderboard = T.tune(offset_sampler([0.5]), train_set, val_set,
                               spec)
    assert len(leaderboard) == 1
    row = leaderboard[0]
    assert row.status == "completed"
    assert [e for e, _ in row.rung_scores] == [1, 2, 3]
    assert math.isfinite(row.score)
    assert best is not None


def test_tune_dominant_trial_wins():
    train_set, val_set = tuning_fixture()
    spec = T.TunerSpec(budget=4, rungs=(1, 2), seed=0)
    best, leaderboard = T.tune(offset_sampler([3.0, 0.0, 6.0, 9.0]),
                               train_set, val_set, spec)
    by_index = {row.index: row for row in leaderboard}
    assert by_index[1].status == "completed"
    assert by_index[1].score == min(r.score for r in leaderboard)
    assert leaderboard[0].index == 1
    # the winner predicts the near-constant doping well
    assert np.abs(M.infer(best, val_set.records[0].u) - 1.0).max() < 0.5
    statuses = sorted(r.status for r in leaderboard)
    assert statuses == ["completed", "completed", "stopped", "stopped"]


def test_tune_scheduler_rung_counts():
    train_set, val_set = tuning_fixture()
    spec = T.TunerSpec(budget=9, rungs=(1, 2, 3), seed=0)
    offsets = [0.1 * (i + 1) for i in range(9)]
    _, leaderboard = T.tune(offset_sampler(offsets), train_set, val_set,
                            spec)
    reached = [0, 0, 0]
    for row in leaderboard:
        for k in range(len(row.rung_scores)):
            reached[k] += 1
    assert reached[0] == 9
    for k in (1, 2):
        assert abs(reached[k] - math.ceil(9 / 2 ** k)) <= 1


def test_tune_never_promotes_worse_than_stopped():
    train_set, val_set = tuning_fixture()
    spec = T.TunerSpec(budget=8, rungs=(1, 2, 3), seed=0)
    rng = np.random.default_rng(19)
    offsets = list(rng.permutation(np.arange(1.0, 9.0)))
    _, leaderboard = T.tune(offset_sampler(offsets), train_set, val_set,
                            spec)
    for k in (0, 1):
        promoted = [r.rung_scores[k][1] for r in leaderboard
                    if len(r.rung_scores) > k + 1]
        stopped = [r.rung_scores[k][1] for r in leaderboard
                   if len(r.rung_scores) == k + 1 and r.status == "stopped"]
        if promoted and stopped:
            assert max(promoted) <= min(stopped)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_tune_failed_trial_scores_infinite():
    train_set, val_set = tuning_fixture()

    def sampler(rng):
        index = sampler.count
        sampler.count += 1
        model = M.build_mlp((8, 8, 8, 8, 8, 8), n=10,
                            rng=np.random.default_rng(index))
        lr = 1e15 if index == 0 else 1e-3
        return model, T.TrainOptions(lr=lr, batch_size=8, epochs=1)

    sampler.count = 0
    spec = T.TunerSpec(budget=3, rungs=(1, 2), seed=0)
    best, leaderboard = T.tune(sampler, train_set, val_set, spec)
    failed = [r for r in leaderboard if r.status == "failed"]
    assert len(failed) == 1
    assert failed[0].score == math.inf
    assert failed[0].rung_scores[-1][1] == math.inf
    completed = [r for r in leaderboard if r.status == "completed"]
    assert completed and all(math.isfinite(r.score) for r in completed)


def test_tune_is_deterministic():
    train_set, val_set = tuning_fixture()

    def make_sampler():
        def sampler(rng):
            widths = (8, 8, 8, 8, 8, 8)
            model = M.build_mlp(widths, n=10, rng=rng)
            lr = float(10.0 ** rng.uniform(-3.0, -1.0))
            return model, T.TrainOptions(lr=lr, batch_size=8, epochs=1)

        return sampler

    spec = T.TunerSpec(budget=4, rungs=(1, 2), seed=5)
    best_a, lb_a = T.tune(make_sampler(), train_set, val_set, spec)
    best_b, lb_b = T.tune(make_sampler(), train_set, val_set, spec)
    assert [(r.index, r.status, r.rung_scores) for r in lb_a] == \
        [(r.index, r.status, r.rung_scores) for r in lb_b]
    for name, t in best_a.store.params.items():
        assert np.array_equal(t.values, best_b.store.params[name].values)


# ---------------------------------------------------------------------------
# report export


def test_export_report_round_trip(tmp_path):
    rng = np.random.default_rng(20)
    u = rng.normal(size=(6, 10))
    c = rng.normal(size=(6, 10))
    data = make_dataset(u, c, c0=1.0, role="test")
    report = T.evaluate(M.LinearModel(matrix=np.eye(6)), data)
    written = T.export_report(report, tmp_path / "report")
    assert [p.endswith(".csv") for p in written] == [True, True]

    with open(written[0], newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    errors = np.array([float(r["with_mean"]) for r in rows])
    assert np.array_equal(errors, report.with_mean.errors)

    with open(written[1], newline="") as fh:
        rows = {r["variant"]: r for r in csv.DictReader(fh)}
    for name in ("with_mean", "mean_removed"):
        summary = getattr(report, name)
        assert float(rows[name]["mean"]) == summary.mean
        assert float(rows[name]["p25"]) == summary.p25
        assert float(rows[name]["p50"]) == summary.p50
        assert float(rows[name]["p75"]) == summary.p75
    assert rows["with_mean"]["selected"] == "1"


def test_export_report_histogram(tmp_path):
    rng = np.random.default_rng(21)
    u = rng.normal(size=(6, 25))
    c = rng.normal(size=(6, 25))
    data = make_dataset(u, c, c0=1.0, role="test")
    report = T.evaluate(M.LinearModel(matrix=np.eye(6)), data)
    written = T.export_report(report, tmp_path / "full", histogram=True)
    assert written[-1].endswith(".hist.svg")
    payload = open(written[-1], "rb").read()
    assert b"<svg" in payload[:500]
    counts, _ = np.histogram(report.active.errors, bins=10)
    assert counts.sum() == len(data)
    again = T.export_report(report, tmp_path / "again", histogram=True)
    assert open(again[-1], "rb").read() == payload  # deterministic render
