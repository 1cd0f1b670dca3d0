"""
Tests for the loss, optimizer, schedule, early stopping and two-phase trainer
"""
import json
import math

import numpy as np
import pandas as pd
import pytest

from data import RoiDataset, SplitAssignment, iter_batches, stratified_split
from errors import ContractError, DataError, DigestMismatchError, NumericError
from fusion import is_backbone
from models import ExperimentConfig
from tensor import DiffArray, grad_check, precision
from trainer import (
    HISTORY_COLUMNS, AdamW, Schedule, Trainer, adamw_step, class_weights, cosine_lr, cycle_position, early_stop,
    weighted_bce,
)


@pytest.fixture
def make_trainer(tiny_experiment, synth_root, synth_records, tmp_path):
    root, _ = synth_root
    split = stratified_split(synth_records, seed=0)

    def build(config=tiny_experiment, out=tmp_path / "run", assignment=split):
        train_set = RoiDataset(synth_records, root, config.data.image_size, augment=True, seed=config.train.seed)
        val_set = RoiDataset(synth_records, root, config.data.image_size)
        return Trainer(config, train_set, val_set, assignment, out)

    return build


def adam_oracle(theta, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """Plain Adam without weight decay, step by step in float64"""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        theta = theta - lr * (m / (1 - betas[0] ** t)) / (np.sqrt(v / (1 - betas[1] ** t)) + eps)
    return theta


# ============================================================================
# LOSS
# ============================================================================

class TestClassWeights:

    def test_balanced(self):
        assert class_weights([0] * 500 + [1] * 500) == (1.0, 1.0)

    def test_imbalanced(self):
        w0, w1 = class_weights([0] * 700 + [1] * 300)
        assert w0 == pytest.approx(0.7142857142857143)
        assert w1 == pytest.approx(1.6666666666666667)
        assert w0 * 700 == pytest.approx(w1 * 300, rel=1e-15)

    def test_single_class(self):
        with pytest.raises(DataError):
            class_weights([1, 1, 1])

    def test_non_binary(self):
        with pytest.raises(ContractError):
            class_weights([0, 1, 2])


class TestWeightedBCE:

    @pytest.mark.parametrize("label", [0, 1])
    def test_zero_logit_is_ln2(self, label):
        loss = weighted_bce(DiffArray(np.zeros(3)), np.full(3, label))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_large_logit_does_not_overflow(self):
        with precision(np.float64):
            loss = weighted_bce(DiffArray(np.array([20.0])), np.array([1]))
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_extreme_logits_stay_finite(self):
        loss = weighted_bce(DiffArray(np.array([1000.0, -1000.0])), np.array([0, 1]))
        assert loss.item() == pytest.approx(1000.0)

    def test_doubling_both_weights_doubles_loss(self, rng):
        logits = DiffArray(rng.standard_normal(8))
        labels = rng.integers(0, 2, 8)
        single = weighted_bce(logits, labels, (0.8, 1.3)).item()
        double = weighted_bce(logits, labels, (1.6, 2.6)).item()
        assert double == 2 * single

    def test_duplicate_sample_equals_doubled_weight(self):
        with precision(np.float64):
            z = np.array([0.3, -1.2, 2.0])
            labels = np.array([1, 0, 1])
            duplicated = weighted_bce(DiffArray(np.r_[z, z[-1]]), np.r_[labels, labels[-1]]).item()
            weighted = weighted_bce(DiffArray(z), labels, sample_weights=[1.0, 1.0, 2.0]).item()
        assert duplicated * 4 == pytest.approx(weighted * 3, abs=1e-6)

    def test_matches_probability_form(self, rng):
        with precision(np.float64):
            z = rng.standard_normal(6)
            labels = np.array([0, 1, 1, 0, 1, 0])
            loss = weighted_bce(DiffArray(z), labels, (0.5, 2.0)).item()
        p = 1 / (1 + np.exp(-z))
        w = np.where(labels == 1, 2.0, 0.5)
        expected = np.mean(-w * (labels * np.log(p) + (1 - labels) * np.log(1 - p)))
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient(self, rng):
        labels = np.array([1, 0, 0, 1, 1])
        err = grad_check(lambda z: weighted_bce(z, labels, (0.7, 1.6)), rng.standard_normal(5))
        assert err < 1e-4

    def test_label_shape_mismatch(self):
        with pytest.raises(ContractError):
            weighted_bce(DiffArray(np.zeros(3)), np.zeros(4))

    def test_non_binary_label(self):
        with pytest.raises(ContractError):
            weighted_bce(DiffArray(np.zeros(2)), np.array([0, 2]))


# ============================================================================
# OPTIMIZER AND SCHEDULE
# ============================================================================

class TestAdamW:

    def _zeros(self, *shape):
        return np.zeros(shape, dtype=np.float64)

    def test_zero_gradient_without_decay_is_a_no_op(self):
        theta = np.array([1.5, -2.0])
        new, _, _ = adamw_step(theta, self._zeros(2), self._zeros(2), self._zeros(2), 1, 0.1, weight_decay=0.0)
        np.testing.assert_array_equal(new, theta)

    def test_decay_only_step(self):
        new, _, _ = adamw_step(np.ones(1), self._zeros(1), self._zeros(1), self._zeros(1), 1, 0.1, weight_decay=0.01)
        assert new[0] == pytest.approx(0.999, abs=1e-12)

    def test_first_step_matches_formula(self):
        new, m, v = adamw_step(np.ones(1), np.ones(1), self._zeros(1), self._zeros(1), 1, 1e-3)
        expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01)
        assert abs(new[0] - expected) < 1e-9
        assert m[0] == pytest.approx(0.1) and v[0] == pytest.approx(0.001)

    def test_without_decay_equals_adam(self, rng):
        theta0 = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(10)]
        theta, m, v = theta0.copy(), self._zeros(4), self._zeros(4)
        for t, g in enumerate(grads, start=1):
            theta, m, v = adamw_step(theta, g, m, v, t, 1e-2, weight_decay=0.0)
        np.testing.assert_allclose(theta, adam_oracle(theta0, grads, 1e-2), rtol=0, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adamw_step(np.ones(2), np.ones(3), self._zeros(2), self._zeros(2), 1, 0.1)

    def test_optimizer_tracks_steps_per_parameter(self):
        params = {"a": DiffArray(np.ones(2)), "b": DiffArray(np.ones(3))}
        opt = AdamW()
        original = params["a"].data
        opt.step(params, {"a": np.ones(2, dtype=np.float32)}, {"a": 0.1})
        opt.step(params, {"a": np.ones(2, dtype=np.float32), "b": np.ones(3, dtype=np.float32)}, {"a": 0.1, "b": 0.1})
        assert opt.steps == {"a": 2, "b": 1}
        np.testing.assert_array_equal(original, np.ones(2, dtype=np.float32))
        assert params["a"].data.dtype == np.float32


class TestSchedule:

    def test_cycle_anchors(self):
        assert cosine_lr(0, 10, 1.0, 0.01) == pytest.approx(1.0)
        assert cosine_lr(10, 10, 1.0, 0.01) == pytest.approx(0.01)
        assert cosine_lr(5, 10, 1.0, 0.01) == pytest.approx(0.505)

    def test_default_floor_is_a_hundredth(self):
        sched = Schedule(3e-4)
        assert sched.eta_min == pytest.approx(3e-6)
        assert sched.lr(0) == pytest.approx(3e-4)

    def test_restarts_at_ten_and_thirty(self):
        sched = Schedule(1.0, t0=10, t_mult=2)
        assert sched.restarts(50) == [10, 30]
        assert sched.lr(10) == sched.lr(30) == sched.lr(0)
        assert sched.lr(9) < sched.lr(10)

    def test_cycle_positions(self):
        assert cycle_position(0, 10, 2) == (0, 10)
        assert cycle_position(29, 10, 2) == (19, 20)
        assert cycle_position(30, 10, 2) == (0, 40)
        assert cycle_position(7, 3, 1) == (1, 3)

    def test_monotone_within_a_cycle(self):
        sched = Schedule(1.0, t0=10, t_mult=2)
        rates = [sched.lr(e) for e in range(10, 30)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("kwargs", [{"eta_min": 2.0}, {"t0": 0}, {"t_mult": 0}])
    def test_invalid_schedules(self, kwargs):
        with pytest.raises(ContractError):
            Schedule(1.0, **kwargs)

    def test_negative_epoch(self):
        with pytest.raises(ContractError):
            cycle_position(-1, 10, 2)


class TestEarlyStop:

    def test_rising_auc_never_stops(self):
        history = [0.5 + 0.01 * i for i in range(30)]
        assert not any(early_stop(history[:n], patience=3) for n in range(1, 31))

    def test_flat_for_patience_plus_one(self):
        assert early_stop([0.7] * 11, patience=10)
        assert not early_stop([0.7] * 10, patience=10)

    def test_traced_example(self):
        history = [0.6, 0.7, 0.69, 0.69, 0.69]
        assert not early_stop(history[:4], patience=3)
        assert early_stop(history, patience=3)

    def test_improvement_below_min_delta_is_stale(self):
        assert early_stop([0.7, 0.70005, 0.70009], patience=2, min_delta=1e-4)
        assert not early_stop([0.7, 0.7002, 0.7004], patience=2, min_delta=1e-4)

    def test_undefined_auc_never_improves(self):
        assert early_stop([None, None, None], patience=3)

    def test_patience_must_be_positive(self):
        with pytest.raises(ContractError):
            early_stop([0.5], patience=0)


# ============================================================================
# TRAINER
# ============================================================================

class TestTrainer:

    def test_feature_extraction_freezes_backbone(self, make_trainer):
        trainer = make_trainer()
        before = {name: p.data.copy() for name, p in trainer.params.items()}
        rows = trainer.train_phase("feature_extraction")
        assert len(rows) == 1
        for name, p in trainer.params.items():
            if is_backbone(name):
                assert np.array_equal(p.data, before[name]), name
        assert any(not np.array_equal(p.data, before[n]) for n, p in trainer.params.items() if not is_backbone(n))
        assert rows[0].lr_backbone == 0.0 and rows[0].lr_new == pytest.approx(3e-4)

    def test_first_fine_tuning_step_moves_backbone(self, make_trainer):
        trainer = make_trainer()
        trainer.train_phase("feature_extraction")
        frozen = {name: p.data.copy() for name, p in trainer.params.items() if is_backbone(name)}
        images, labels, _ = next(iter_batches(trainer.train_set, trainer.train_idx, 8, epoch=1))
        trainer.train_step(images, labels, "fine_tuning", epoch=1)
        assert any(not np.array_equal(trainer.params[name].data, value) for name, value in frozen.items())
        assert all(trainer.params[name].data.dtype == np.float32 for name in frozen)

    def test_learning_rates_per_phase(self, make_trainer):
        trainer = make_trainer()
        assert trainer.learning_rates(0, "feature_extraction") == (pytest.approx(3e-4), 0.0)
        assert trainer.learning_rates(0, "fine_tuning") == (pytest.approx(3e-4), pytest.approx(3e-5))

    def test_trainable_groups(self, make_trainer):
        trainer = make_trainer()
        frozen = set(trainer.params) - set(trainer.trainable("feature_extraction"))
        assert frozen and all(is_backbone(name) for name in frozen)
        assert trainer.trainable("fine_tuning") == list(trainer.params)
        assert trainer.parameter_counts["total"] == sum(p.data.size for p in trainer.params.values())
        with pytest.raises(ContractError):
            trainer.trainable("warmup")

    def test_fit_writes_history_and_checkpoints(self, make_trainer, tmp_path):
        trainer = make_trainer()
        history = trainer.fit()
        assert [row.phase for row in history] == ["feature_extraction", "fine_tuning", "fine_tuning"]
        assert [row.epoch for row in history] == [0, 1, 2]
        frame = pd.read_csv(tmp_path / "run" / "history.csv")
        assert list(frame.columns) == HISTORY_COLUMNS
        assert len(frame) == 3
        assert (tmp_path / "run" / "checkpoints" / "best" / "manifest.json").exists()
        assert (tmp_path / "run" / "checkpoints" / "last" / "tensors.bin").exists()

    def test_separate_budgets(self, tiny_experiment, make_trainer):
        config = ExperimentConfig.model_validate(
            {**tiny_experiment.model_dump(), "train": {**tiny_experiment.train.model_dump(), "shared_budget": False}})
        trainer = make_trainer(config=config)
        assert trainer.phase_lengths() == {"feature_extraction": 3, "fine_tuning": 3}

    def test_empty_training_split(self, make_trainer, synth_records):
        everyone_val = SplitAssignment(assignment={r.patient_id: "val" for r in synth_records}, seed=0)
        with pytest.raises(DataError):
            make_trainer(assignment=everyone_val)

    def test_non_finite_loss_writes_diagnostic(self, make_trainer, tmp_path):
        trainer = make_trainer()
        images, labels, _ = next(iter_batches(trainer.train_set, trainer.train_idx, 4))
        head = trainer.params["head.0.w"]
        head.data = np.full(head.shape, np.nan, dtype=np.float32)
        with pytest.raises(NumericError):
            trainer.train_step(images, labels, "feature_extraction", 0)
        dump = json.loads((tmp_path / "run" / "nan_diagnostic.json").read_text())
        assert dump["phase"] == "feature_extraction"
        assert dump["params"]["head.0.w"]["finite"] is False

    def test_resume_reproduces_next_step_bitwise(self, make_trainer, tmp_path):
        first = make_trainer(out=tmp_path / "a")
        first.train_epoch("feature_extraction")
        path = first.save(tmp_path / "ckpt")
        images, labels, _ = next(iter_batches(first.train_set, first.train_idx, 8, epoch=1))

        second = make_trainer(out=tmp_path / "b")
        second.resume(path)
        assert len(second.history) == 1 and second.optimizer.steps == first.optimizer.steps

        first.train_step(images, labels, "fine_tuning", 1)
        second.train_step(images, labels, "fine_tuning", 1)
        for name in first.params:
            assert np.array_equal(first.params[name].data, second.params[name].data), name
        assert np.array_equal(first.shuffle_rng.permutation(10), second.shuffle_rng.permutation(10))

    def test_resume_refuses_other_split(self, make_trainer, synth_records, tmp_path):
        path = make_trainer(out=tmp_path / "a").save(tmp_path / "ckpt")
        other = make_trainer(out=tmp_path / "b", assignment=stratified_split(synth_records, seed=99))
        if other.split_digest == make_trainer(out=tmp_path / "c").split_digest:
            pytest.skip("seeds produced the same split")
        with pytest.raises(DigestMismatchError):
            other.resume(path)


@pytest.mark.slow
def test_loss_decreases_on_easy_synthetic_data(tmp_path):
    from data import match_manifest, read_manifest, scan_images, synth_dataset, write_synth_dataset

    decreased = 0
    for seed in range(10):
        root = tmp_path / f"synth{seed}"
        manifest = write_synth_dataset(synth_dataset(60, image_size=32, seed=seed, difficulty="easy"), root)
        records = match_manifest(read_manifest(manifest), scan_images(root).files, root).records
        config = ExperimentConfig.model_validate({
            "model": {"backbone": "tiny", "token_dim": 16, "scan": {"d_state": 4, "blocks": 1}},
            "data": {"manifest": str(manifest), "image_root": str(root), "image_size": 32},
            "train": {"epochs": 6, "phase1_epochs": 5, "batch_size": 8, "seed": seed, "lr_new": 1e-3},
        })
        trainer = Trainer(
            config,
            RoiDataset(records, root, 32, augment=True, seed=seed),
            RoiDataset(records, root, 32),
            stratified_split(records, seed=seed),
            tmp_path / f"run{seed}",
        )
        rows = [trainer.train_epoch("feature_extraction") for _ in range(5)]
        decreased += rows[-1].train_loss < rows[0].train_loss
    assert decreased >= 9


def learning_run(variant, seed, out):
    """Best validation AUC of a tiny run on 200 easy synthetic ROIs at 64x64"""
    from cli import prepare

    config = ExperimentConfig.model_validate({
        "model": {"variant": variant, "backbone": "tiny", "token_dim": 64},
        "data": {"image_size": 64, "synth": {"n": 200, "difficulty": "easy", "image_size": 64}},
        "train": {"epochs": 20, "phase1_epochs": 10, "seed": seed},
    })
    prepared = prepare(config, out)
    records, root = prepared.records, prepared.image_root
    trainer = Trainer(
        prepared.config,
        RoiDataset(records, root, 64, augment=True, seed=seed),
        RoiDataset(records, root, 64),
        prepared.split,
        out,
    )
    history = trainer.fit()
    assert len(history) <= 20
    return max(row.val_auc for row in history if row.val_auc is not None)


@pytest.mark.slow
def test_hybrid_learns_easy_synthetic_data(tmp_path):
    aucs = [learning_run("hybrid", seed, tmp_path / f"hybrid{seed}") for seed in range(5)]
    assert sum(auc >= 0.95 for auc in aucs) >= 4, aucs


@pytest.mark.slow
def test_ablation_variants_learn_and_hybrid_keeps_up(tmp_path):
    components = {variant: learning_run(variant, 0, tmp_path / variant) for variant in ("backbone_only", "vim_only")}
    assert all(auc >= 0.90 for auc in components.values()), components
    hybrid = learning_run("hybrid", 0, tmp_path / "hybrid")
    assert hybrid >= max(components.values()) - 0.02, (hybrid, components)
