"""Masking, losses, reports, and the two-stage training procedure."""

import os

import numpy as np
import pytest

from faim.data import SeriesDataset, make_synthetic_freq_dataset
from faim.errors import InputError, ShapeError
from faim.metrics import accuracy_and_macro_f1
from faim.model import FaimConfig, build_model, load_checkpoint
from faim.tensor import Tape, Tensor, backward, parameter
from faim.training import (
    REPORT_COLUMNS,
    TrainReport,
    batch_label_smoothed_ce,
    evaluate,
    finetune,
    label_smoothed_ce,
    make_mask,
    masked_mse,
    predict_dataset,
    pretrain,
    smooth_targets,
)


def tiny_config(**kw):
    base = dict(patch_len=4, embed_dim=8, n_layers=1, ssm_state=4, batch_size=16, seed=0)
    base.update(kw)
    return FaimConfig(**base)


def toy_separable(n_per_class=8, t=16):
    """Constant series vs linear ramps: linearly separable two-class corpus."""
    samples = []
    rng = np.random.default_rng(0)
    for _ in range(n_per_class):
        samples.append((np.full((1, t), 0.2 * rng.normal()), 0))
        samples.append((np.linspace(-1, 1, t)[None, :] + 0.1 * rng.normal(), 1))
    return SeriesDataset(samples, 2, 1, t, {"0": 0, "1": 1})


class TestMakeMask:
    def test_zero_ratio_gives_all_zeros(self):
        plan = make_mask((3, 10), 0.0, seed=1)
        np.testing.assert_array_equal(plan.lam, np.zeros((3, 10)))

    def test_exact_count_per_row(self):
        plan = make_mask((4, 10), 0.5, seed=2)
        np.testing.assert_array_equal(plan.lam.sum(axis=-1), np.full(4, 5.0))
        assert set(np.unique(plan.lam)) <= {0.0, 1.0}

    def test_rounding_rule(self):
        plan = make_mask((1, 7), 0.4, seed=3)  # round(2.8) = 3
        assert plan.lam.sum() == 3.0

    def test_deterministic(self):
        a = make_mask((2, 3, 8), 0.4, seed=4)
        b = make_mask((2, 3, 8), 0.4, seed=4)
        np.testing.assert_array_equal(a.lam, b.lam)

    def test_seed_changes_plan(self):
        a = make_mask((4, 16), 0.5, seed=5)
        b = make_mask((4, 16), 0.5, seed=6)
        assert not np.array_equal(a.lam, b.lam)

    def test_rows_differ_within_a_plan(self):
        plan = make_mask((8, 16), 0.5, seed=7)
        assert len({row.tobytes() for row in plan.lam}) > 1

    def test_ratio_bounds(self):
        with pytest.raises(InputError):
            make_mask((2, 4), 1.0, seed=0)
        with pytest.raises(InputError):
            make_mask((2, 4), -0.1, seed=0)


class TestMaskedMse:
    def test_perfect_reconstruction_is_zero(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        with Tape():
            loss = masked_mse(x, Tensor(x.copy()), np.ones((2, 3)))
        assert loss.item() == 0.0

    def test_single_patch_worked_example(self):
        # error vector [1, -1, 0, 0] over b=4: per-patch mean 0.5, one mask
        x = np.zeros((1, 4))
        x_hat = np.array([[1.0, -1.0, 0.0, 0.0]])
        with Tape():
            loss = masked_mse(x, Tensor(x_hat), np.ones(1))
        np.testing.assert_allclose(loss.item(), 0.5, rtol=1e-15)

    def test_unmasked_perturbations_do_not_move_the_loss(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4))
        x_hat = rng.normal(size=(3, 4))
        lam = np.array([1.0, 0.0, 1.0])
        with Tape():
            before = masked_mse(x, Tensor(x_hat), lam)
        bumped = x_hat.copy()
        bumped[1] += 100.0
        with Tape():
            after = masked_mse(x, Tensor(bumped), lam)
        assert before.item() == after.item()

    def test_gradient_is_exactly_zero_on_unmasked_patches(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 3))
        lam = np.array([1.0, 0.0, 0.0, 1.0])
        with Tape() as tape:
            x_hat = parameter(rng.normal(size=(4, 3)))
            loss = masked_mse(x, x_hat, lam)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x_hat][1], np.zeros(3))
        np.testing.assert_array_equal(grads[x_hat][2], np.zeros(3))
        assert np.max(np.abs(grads[x_hat][0])) > 0
        assert np.max(np.abs(grads[x_hat][3])) > 0

    def test_masked_gradient_matches_closed_form(self):
        # d/dx_hat of (1/sum lam) * lam * mean_b((x_hat - x)^2) = 2*lam*diff/(b*sum)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        lam = np.array([1.0, 0.0, 1.0])
        with Tape() as tape:
            x_hat = parameter(rng.normal(size=(3, 4)))
            loss = masked_mse(x, x_hat, lam)
        grads = backward(tape, loss)
        expected = 2.0 * lam[:, None] * (x_hat.data - x) / (4 * lam.sum())
        np.testing.assert_allclose(grads[x_hat], expected, atol=1e-15)

    def test_empty_mask_returns_zero(self):
        x = np.ones((2, 4))
        with Tape():
            loss = masked_mse(x, Tensor(np.zeros((2, 4))), np.zeros(2))
        assert loss.item() == 0.0

    def test_shape_disagreement_rejected(self):
        with pytest.raises(ShapeError):
            masked_mse(np.ones((2, 4)), Tensor(np.ones((2, 4))), np.ones(3))


class TestLabelSmoothedCe:
    def test_smoothed_targets_two_class_example(self):
        np.testing.assert_allclose(smooth_targets(0, 2, 0.1), [0.95, 0.05], rtol=1e-15)

    def test_targets_sum_to_one_and_onehot_at_zero_eps(self):
        for k in (2, 3, 7):
            for eps in (0.0, 0.1, 0.5):
                t = smooth_targets(1, k, eps)
                np.testing.assert_allclose(t.sum(), 1.0, rtol=1e-15)
        np.testing.assert_array_equal(smooth_targets(2, 4, 0.0), [0, 0, 1, 0])

    def test_uniform_logits_give_log_k(self):
        with Tape():
            loss = label_smoothed_ce(Tensor(np.zeros(4)), 2, 0.0)
        np.testing.assert_allclose(loss.item(), np.log(4.0), rtol=1e-12)

    def test_scalar_case_matches_direct_evaluation(self):
        logits = np.array([2.0, 0.0, 0.0])
        with Tape():
            loss = label_smoothed_ce(Tensor(logits), 0, 0.1)
        p = np.exp(logits) / np.exp(logits).sum()
        targets = np.array([0.9 + 0.1 / 3, 0.1 / 3, 0.1 / 3])
        np.testing.assert_allclose(loss.item(), -(targets * np.log(p)).sum(), rtol=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(InputError):
            label_smoothed_ce(Tensor(np.zeros(3)), 3, 0.1)

    def test_single_class_rejected(self):
        with pytest.raises(InputError):
            label_smoothed_ce(Tensor(np.zeros(1)), 0, 0.1)

    def test_matrix_logits_rejected(self):
        with pytest.raises(ShapeError):
            label_smoothed_ce(Tensor(np.zeros((2, 3))), 0, 0.1)

    def test_gradient_vanishes_at_the_analytic_optimum(self):
        targets = smooth_targets(0, 3, 0.1)
        with Tape() as tape:
            logits = parameter(np.log(targets))
            loss = label_smoothed_ce(logits, 0, 0.1)
        grads = backward(tape, loss)
        assert np.linalg.norm(grads[logits]) < 1e-6

    def test_loss_bounded_below_by_smoothed_entropy(self):
        targets = smooth_targets(1, 4, 0.2)
        entropy = -(targets * np.log(targets)).sum()
        rng = np.random.default_rng(4)
        for _ in range(20):
            with Tape():
                loss = label_smoothed_ce(Tensor(rng.normal(size=4) * 3), 1, 0.2)
            assert loss.item() >= entropy - 1e-12
        with Tape():
            at_opt = label_smoothed_ce(Tensor(np.log(targets)), 1, 0.2)
        np.testing.assert_allclose(at_opt.item(), entropy, rtol=1e-12)

    def test_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])
        with Tape():
            batch = batch_label_smoothed_ce(Tensor(logits), labels, 0.1)
            singles = [label_smoothed_ce(Tensor(logits[i]), int(labels[i]), 0.1) for i in range(4)]
        np.testing.assert_allclose(batch.item(), np.mean([s.item() for s in singles]), rtol=1e-12)

    def test_large_logits_stay_finite(self):
        with Tape():
            loss = label_smoothed_ce(Tensor(np.array([1000.0, 0.0, -1000.0])), 0, 0.1)
        assert np.isfinite(loss.item())


class TestTrainReport:
    def test_csv_layout_and_none_cells(self):
        report = TrainReport()
        report.add(1, "train", 0.5, None, None, 1.25)
        report.add(1, "val", 0.25, 1.0, 1.0, 0.0)
        expected = (
            "epoch,split,loss,accuracy,macro_f1,seconds\n"
            "1,train,0.5,,,1.25\n"
            "1,val,0.25,1.0,1.0,0.0\n"
        )
        assert report.to_csv() == expected
        assert ",".join(REPORT_COLUMNS) == expected.splitlines()[0]

    def test_timing_suppression_zeroes_seconds_only(self):
        report = TrainReport()
        report.add(1, "train", 0.5, None, None, 3.7)
        assert report.to_csv(include_timing=False).splitlines()[1] == "1,train,0.5,,,0.0"

    def test_summary_text_is_sorted(self):
        report = TrainReport()
        report.summary.update({"zeta": 1, "alpha": "x"})
        assert report.summary_text() == "alpha=x\nzeta=1\n"


class TestPretrain:
    def _corpus(self, n=2, sigma=0.1, seed=0):
        return make_synthetic_freq_dataset(n, 16, [2.0, 5.0], sigma, seed)

    def test_smoke_writes_checkpoint(self, tmp_path):
        path = str(tmp_path / "pre.ckpt")
        config = tiny_config(pretrain_epochs=1, batch_size=4)
        model, report = pretrain(self._corpus(), config, checkpoint_path=path)
        losses = [r.loss for r in report.rows]
        assert len(losses) == 1 and np.isfinite(losses[0]) and losses[0] > 0
        assert os.path.exists(path)
        loaded, meta = load_checkpoint(path)
        assert meta["seed"] == 0
        for (_, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_zero_mask_ratio_gives_zero_loss_stream(self):
        config = tiny_config(pretrain_epochs=3, batch_size=4, mask_ratio=0.0)
        _, report = pretrain(self._corpus(), config)
        assert [r.loss for r in report.rows] == [0.0, 0.0, 0.0]

    def test_deterministic_runs(self):
        config = tiny_config(pretrain_epochs=2, batch_size=4)
        m1, r1 = pretrain(self._corpus(), config)
        m2, r2 = pretrain(self._corpus(), config)
        assert [r.loss for r in r1.rows] == [r.loss for r in r2.rows]
        for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_empty_dataset_rejected(self):
        empty = SeriesDataset([], 2, 1, 16, {})
        with pytest.raises(InputError):
            pretrain(empty, tiny_config(pretrain_epochs=1))

    def test_returns_best_loss_state(self):
        config = tiny_config(pretrain_epochs=4, batch_size=4)
        _, report = pretrain(self._corpus(), config)
        best = float(report.summary["best_loss"])
        assert best == min(r.loss for r in report.rows)


class TestFinetune:
    def test_zero_lr_is_a_no_op(self):
        ds = toy_separable()
        config = tiny_config(lr=0.0, finetune_epochs=2)
        init = build_model(config, ds.n_classes, ds.n_channels, ds.series_len)
        before = [t.data.copy() for t in init.parameters()]
        loss0, acc0, _ = evaluate(init, ds)
        model, report = finetune(ds, config, init=init, val_dataset=ds)
        for t, b in zip(model.parameters(), before):
            assert t.data.tobytes() == b.tobytes()
        assert all(r.accuracy == acc0 for r in report.rows if r.split == "val")

    def test_separable_toy_reaches_perfect_train_accuracy(self):
        ds = toy_separable()
        config = tiny_config(lr=1e-2, finetune_epochs=20)
        model, _ = finetune(ds, config, val_dataset=ds)
        _, acc, f1 = evaluate(model, ds)
        assert acc == 1.0 and f1 == 1.0

    def test_deterministic_runs(self):
        ds = toy_separable(n_per_class=4)
        config = tiny_config(lr=1e-2, finetune_epochs=3)
        m1, r1 = finetune(ds, config)
        m2, r2 = finetune(ds, config)
        assert r1.to_csv(include_timing=False) == r2.to_csv(include_timing=False)
        for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_missing_class_warns(self):
        samples = [(np.ones((1, 16)) * i, 0) for i in range(6)]
        ds = SeriesDataset(samples, 2, 1, 16, {"0": 0, "x": 1})
        with pytest.warns(UserWarning, match="absent"):
            finetune(ds, tiny_config(finetune_epochs=1), val_dataset=ds)

    def test_best_epoch_tracked(self):
        ds = toy_separable(n_per_class=4)
        config = tiny_config(lr=1e-2, finetune_epochs=5)
        _, report = finetune(ds, config, val_dataset=ds)
        accs = {r.epoch: r.accuracy for r in report.rows if r.split == "val"}
        best_epoch = int(report.summary["best_epoch"])
        best_acc = float(report.summary["best_val_accuracy"])
        assert accs[best_epoch] == best_acc
        # >= keeps the latest tying epoch
        assert all(accs[e] < best_acc for e in accs if e > best_epoch) or best_epoch == max(accs)

    def test_one_step_decreases_loss(self):
        for seed in range(3):
            ds = toy_separable(n_per_class=4)
            config = tiny_config(lr=1e-3, finetune_epochs=1, seed=seed)
            init = build_model(config, ds.n_classes, ds.n_channels, ds.series_len)
            before, _, _ = evaluate(init, ds)
            model, _ = finetune(ds, config, init=init, val_dataset=ds)
            after, _, _ = evaluate(model, ds)
            assert after < before, f"seed {seed}: {after} !< {before}"


class TestEvaluate:
    def test_matches_metric_helpers(self):
        ds = toy_separable(n_per_class=4)
        config = tiny_config()
        model = build_model(config, ds.n_classes, ds.n_channels, ds.series_len)
        preds = predict_dataset(model, ds)
        _, labels = ds.arrays()
        acc, f1 = accuracy_and_macro_f1(preds, labels, ds.n_classes)
        loss, acc2, f12 = evaluate(model, ds)
        assert (acc, f1) == (acc2, f12)
        assert np.isfinite(loss)

    def test_batch_size_does_not_change_results(self):
        ds = toy_separable(n_per_class=6)
        model = build_model(tiny_config(), ds.n_classes, ds.n_channels, ds.series_len)
        full = evaluate(model, ds, batch_size=256)
        chunked = evaluate(model, ds, batch_size=3)
        np.testing.assert_allclose(full[0], chunked[0], atol=1e-12)
        assert full[1:] == chunked[1:]
