import numpy as np
import pytest

from mtscan import tensor as T
from mtscan.data import generate_dataset
from mtscan.errors import DataError, MetricError
from mtscan.metrics import (
    MetricReport,
    metric_boundary_f,
    metric_merr,
    metric_miou,
    metric_rmse,
    mtl_gain,
)
from mtscan.model import Model, ModelConfig, TaskSpec, read_checkpoint, save_checkpoint
from mtscan.tensor import Tensor, grad_check
from mtscan.train import (
    TrainSettings,
    adam_init,
    adam_step,
    cross_entropy_logits,
    evaluate,
    fixed_task_orders,
    l1_loss,
    loss_total,
    poly_lr,
    run_ablation,
    train,
)

TINY = ModelConfig(
    tasks=(TaskSpec("semseg", 3, "cross_entropy"), TaskSpec("depth", 1, "l1")),
    base_channels=4, n_state=2, scan_scales=((1, 2),) * 3, decoder_channels=16,
)


def tiny_data(n=6, seed=0):
    return generate_dataset(seed, n, 32, 32, n_objects=2, num_classes=3)


class TestMetrics:
    def test_perfect_predictions(self):
        label = np.array([[0, 1], [2, 1]])
        assert metric_miou(label, label, 3) == 1.0
        depth = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert metric_rmse(depth, depth) == 0.0
        n = np.zeros((3, 2, 2))
        n[2] = 1.0
        assert metric_merr(n, n) == pytest.approx(0.0, abs=1e-5)
        b = np.array([[1, 0], [0, 1]])
        assert metric_boundary_f(b.astype(float), b) == 1.0

    def test_orthogonal_normals_90_degrees(self):
        a = np.zeros((3, 2, 2))
        a[0] = 1.0
        b = np.zeros((3, 2, 2))
        b[2] = 1.0
        assert metric_merr(a, b) == pytest.approx(90.0)

    def test_miou_hand_case(self):
        pred = np.array([0, 0, 1, 1]).reshape(2, 2)
        label = np.array([0, 1, 1, 1]).reshape(2, 2)
        assert metric_miou(pred, label, 2) == pytest.approx(7 / 12)

    def test_miou_skips_absent_classes(self):
        pred = np.array([[0, 0], [1, 1]])
        label = np.array([[0, 1], [1, 1]])
        with_headroom = metric_miou(pred, label, 5)
        assert with_headroom == pytest.approx(metric_miou(pred, label, 2))

    def test_rmse_empty_mask_raises(self):
        with pytest.raises(MetricError):
            metric_rmse(np.ones(3), np.full(3, np.nan))

    def test_boundary_tolerance(self):
        label = np.zeros((5, 5), dtype=int)
        label[2, 2] = 1
        pred = np.zeros((5, 5))
        pred[2, 3] = 1.0  # one pixel off: matched under the 1-px dilation
        assert metric_boundary_f(pred, label) == 1.0
        pred_far = np.zeros((5, 5))
        pred_far[0, 0] = 1.0
        assert metric_boundary_f(pred_far, label) == 0.0

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 3, (4, 4))
        label = rng.integers(0, 3, (4, 4))
        perm = rng.permutation(16)
        assert metric_miou(pred, label, 3) == metric_miou(
            pred.reshape(-1)[perm].reshape(4, 4),
            label.reshape(-1)[perm].reshape(4, 4), 3)
        d_pred, d_label = rng.normal(size=(2, 16))
        assert metric_rmse(d_pred, d_label) == metric_rmse(d_pred[perm], d_label[perm])


class TestMtlGain:
    def test_self_comparison_is_zero(self):
        r = MetricReport({"a": 3.0, "b": 0.5}, {"a": True, "b": False})
        assert mtl_gain(r, r) == 0.0

    def test_single_task_ten_percent(self):
        stl = MetricReport({"a": 50.0}, {"a": True})
        new = MetricReport({"a": 55.0}, {"a": True})
        assert mtl_gain(new, stl) == pytest.approx(10.0)

    def test_published_component_rows(self):
        # STL and BIM rows of the four-task benchmark reproduce +4.83
        stl = MetricReport(
            {"semseg": 54.32, "depth": 0.5166, "normal": 19.21, "boundary": 77.30},
            {"semseg": True, "depth": False, "normal": False, "boundary": True},
        )
        bim = MetricReport(
            {"semseg": 57.40, "depth": 0.4733, "normal": 18.55, "boundary": 78.72},
            stl.higher_better,
        )
        mtl = MetricReport(
            {"semseg": 53.72, "depth": 0.5239, "normal": 19.97, "boundary": 76.50},
            stl.higher_better,
        )
        assert mtl_gain(bim, stl) == pytest.approx(4.83, abs=0.05)
        assert mtl_gain(mtl, stl) == pytest.approx(-1.87, abs=0.05)

    def test_per_term_sign_flips_under_swap(self):
        a = MetricReport({"x": 4.0, "y": 2.0}, {"x": True, "y": False})
        b = MetricReport({"x": 5.0, "y": 1.5}, {"x": True, "y": False})
        fwd = [(5 - 4) / 4, -(1.5 - 2) / 2]
        rev = [(4 - 5) / 5, -(2 - 1.5) / 1.5]
        for f, r in zip(fwd, rev):
            assert np.sign(f) == -np.sign(r)
        assert np.sign(mtl_gain(b, a)) == -np.sign(mtl_gain(a, b))

    def test_zero_reference_rejected(self):
        with pytest.raises(MetricError):
            mtl_gain(MetricReport({"a": 1.0}, {"a": True}),
                     MetricReport({"a": 0.0}, {"a": True}))

    def test_task_set_mismatch_rejected(self):
        with pytest.raises(MetricError):
            mtl_gain(MetricReport({"a": 1.0}, {"a": True}),
                     MetricReport({"b": 1.0}, {"b": True}))


class TestLosses:
    def test_perfect_l1_is_zero(self):
        target = np.random.default_rng(0).normal(size=(4, 4, 1))
        assert l1_loss(Tensor(target), target).item() == 0.0

    def test_uniform_ce_is_log2(self):
        logits = Tensor(np.zeros((4, 2)))
        labels = np.zeros(4, dtype=int)
        assert cross_entropy_logits(logits, labels).item() == pytest.approx(np.log(2.0))

    def test_lambda_scaling_doubles_total(self):
        sample = tiny_data(1)[0]
        rng = np.random.default_rng(1)
        preds = {
            "semseg": Tensor(rng.normal(size=(32, 32, 3))),
            "depth": Tensor(rng.normal(size=(32, 32, 1))),
        }
        base = loss_total(preds, sample, TINY.tasks).item()
        doubled_tasks = tuple(
            TaskSpec(t.name, t.out_channels, t.loss, 2.0) for t in TINY.tasks
        )
        preds2 = {k: Tensor(v.data) for k, v in preds.items()}
        assert loss_total(preds2, sample, doubled_tasks).item() == pytest.approx(2 * base)

    def test_out_of_range_class_rejected(self):
        with pytest.raises(DataError):
            cross_entropy_logits(Tensor(np.zeros((2, 2))), np.array([0, 5]))

    def test_ignore_label_excluded(self):
        logits = Tensor(np.array([[0.0, 100.0], [0.0, 0.0]]))
        labels = np.array([-1, 0])
        assert cross_entropy_logits(logits, labels).item() == pytest.approx(np.log(2.0))

    def test_ce_gradcheck(self):
        labels = np.random.default_rng(2).integers(0, 3, 12)

        def f(x):
            return cross_entropy_logits(x, labels)

        assert grad_check(f, Tensor(np.random.default_rng(3).normal(size=(12, 3)))) < 1e-6

    def test_l1_gradcheck(self):
        target = np.random.default_rng(4).normal(size=(3, 3, 1))

        def f(x):
            return l1_loss(x, target)

        assert grad_check(f, Tensor(np.random.default_rng(5).normal(size=(3, 3, 1)))) < 1e-6


class TestAdam:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = {"w": Tensor(np.ones(4), requires_grad=True)}
        state = adam_init(p)
        adam_step(p, state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"].data, np.ones(4))

    def test_first_step_magnitude_is_lr(self):
        p = {"w": Tensor(np.zeros(4), requires_grad=True)}
        p["w"].grad = np.ones(4)
        state = adam_init(p)
        adam_step(p, state, lr=0.01, weight_decay=0.0)
        np.testing.assert_allclose(np.abs(p["w"].data), 0.01, rtol=1e-6)

    def test_poly_schedule_reaches_zero(self):
        assert poly_lr(1e-3, 1000, 1000) == 0.0
        assert poly_lr(1e-3, 0, 1000) == 1e-3
        assert poly_lr(1e-3, 500, 1000) < 1e-3


class TestTrainLoop:
    def test_short_run_decreases_loss(self):
        data = tiny_data(6)
        settings = TrainSettings(iterations=30, batch_size=2, lr=1e-3,
                                 eval_every=100, augment=False)
        result = train(TINY, data[:4], data[4:], settings, seed=0)
        first = np.mean([r["loss"] for r in result.history[:5]])
        last = np.mean([r["loss"] for r in result.history[-5:]])
        assert last < first

    def test_history_has_one_row_per_iteration(self):
        data = tiny_data(4)
        settings = TrainSettings(iterations=8, batch_size=2, eval_every=4,
                                 augment=False)
        result = train(TINY, data[:2], data[2:], settings, seed=1)
        assert [r["iteration"] for r in result.history] == list(range(8))

    def test_deterministic_history(self):
        data = tiny_data(4)
        settings = TrainSettings(iterations=6, batch_size=2, eval_every=3)
        a = train(TINY, data[:2], data[2:], settings, seed=3)
        b = train(TINY, data[:2], data[2:], settings, seed=3)
        assert a.history == b.history

    def test_zero_iterations_checkpoint_equals_init(self, tmp_path):
        data = tiny_data(4)
        ckpt = tmp_path / "best.ckpt"
        settings = TrainSettings(iterations=0, batch_size=1, eval_every=5)
        result = train(TINY, data[:2], data[2:], settings, seed=4,
                       checkpoint_path=ckpt)
        init = Model(TINY, seed=4, input_hw=(32, 32))
        blobs = read_checkpoint(ckpt)
        for name, p in init.params.items():
            np.testing.assert_array_equal(blobs[name], p.data)
        assert result.history == []

    def test_random_task_order_runs(self):
        data = tiny_data(4)
        settings = TrainSettings(iterations=4, batch_size=2, eval_every=10,
                                 random_task_order=True)
        result = train(TINY, data[:2], data[2:], settings, seed=5)
        assert len(result.history) == 4


class TestAblation:
    def test_fixed_orders_are_permutations(self):
        orders = fixed_task_orders(4)
        assert len(orders) == 4
        assert len(set(orders)) == 4
        for o in orders:
            assert sorted(o) == [0, 1, 2, 3]

    def test_task_order_ablation_rows(self):
        data = tiny_data(4)
        settings = TrainSettings(iterations=2, batch_size=2, eval_every=10)
        rows = run_ablation("task_order", TINY, data[:2], data[2:], settings)
        assert len(rows) == 5
        assert rows[-1]["arm"] == "Random"

    def test_uni_vs_bi_rows_differ_only_in_flag(self):
        data = tiny_data(4)
        settings = TrainSettings(iterations=2, batch_size=2, eval_every=10)
        rows = run_ablation("uni_vs_bi", TINY, data[:2], data[2:], settings)
        assert [r["arm"] for r in rows] == ["Uni", "Bi"]
        assert abs(rows[0]["params"] - rows[1]["params"]) / rows[1]["params"] < 0.01

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            run_ablation("nope", TINY, [], [], TrainSettings())


def test_evaluate_reports_all_tasks():
    data = tiny_data(3)
    model = Model(TINY, seed=0, input_hw=(32, 32))
    model.order_override = None
    report, val_loss = evaluate(model, data)
    assert set(report.values) == {"semseg", "depth"}
    assert np.isfinite(val_loss)
