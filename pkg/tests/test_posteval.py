import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from committee_distill.augment import AugmentFlags
from committee_distill.errors import (
    ConfigError,
    DegenerateBatch,
    RangeError,
    ShapeError,
)
from committee_distill.model_zoo import BackboneSpec, model_digest
from committee_distill.posteval import (
    PostEvalConfig,
    TrainingTrace,
    cutmix,
    kd_loss,
    train_student,
)
from committee_distill.recover import init_synthetic
from committee_distill.schedules import cosine_lr
from committee_distill.squeeze import SqueezeConfig, pretrain

MILD = AugmentFlags(rrc_scale=(0.5, 1.0))


class TestKdLoss:
    def test_identical_logits_zero(self):
        logits = torch.randn(4, 10, dtype=torch.float64)
        assert kd_loss(logits, logits, 2.0).item() == pytest.approx(0.0,
                                                                    abs=1e-12)

    def test_one_hot_vs_uniform_closed_form(self):
        teacher = torch.tensor([[100.0, 0.0]], dtype=torch.float64)
        student = torch.zeros(1, 2, dtype=torch.float64)
        value = kd_loss(student, teacher, 1.0).item()
        assert value == pytest.approx(math.log(2.0), abs=1e-9)

    def test_matches_elementwise_oracle(self):
        gen = torch.Generator().manual_seed(21)
        student = torch.randn(4, 10, generator=gen, dtype=torch.float64)
        teacher = torch.randn(4, 10, generator=gen, dtype=torch.float64)
        tau = 2.5
        value = kd_loss(student, teacher, tau).item()

        p = torch.softmax(teacher / tau, dim=1).numpy()
        q = torch.softmax(student / tau, dim=1).numpy()
        oracle = 0.0
        for row_p, row_q in zip(p, q):
            for pi, qi in zip(row_p, row_q):
                oracle += pi * (math.log(pi) - math.log(qi))
        oracle = oracle / 4 * tau * tau
        assert value == pytest.approx(oracle, abs=1e-8)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(3)
        teacher = torch.randn(3, 5, generator=gen, dtype=torch.float64)
        student = torch.randn(3, 5, generator=gen, dtype=torch.float64,
                              requires_grad=True)
        kd_loss(student, teacher, 1.7).backward()
        analytic = student.grad.clone()
        step = 1e-5
        fd = torch.zeros_like(analytic)
        with torch.no_grad():
            flat = student.detach().flatten()
            for i in range(flat.numel()):
                bump = torch.zeros_like(flat)
                bump[i] = step
                up = kd_loss((flat + bump).view_as(student), teacher, 1.7)
                down = kd_loss((flat - bump).view_as(student), teacher, 1.7)
                fd.view(-1)[i] = (up - down) / (2 * step)
        rel = (analytic - fd).norm() / fd.norm()
        assert rel.item() <= 1e-4

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(8)
        for _ in range(20):
            s = torch.randn(2, 6, generator=gen)
            t = torch.randn(2, 6, generator=gen)
            assert kd_loss(s, t, 1.0).item() >= -1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kd_loss(torch.randn(2, 5), torch.randn(2, 6))


class ScriptedRng:
    """Deterministic stand-in for numpy Generator in cutmix tests."""

    def __init__(self, beta_value, perm, integer_values):
        self._beta = beta_value
        self._perm = np.asarray(perm)
        self._integers = list(integer_values)

    def beta(self, a, b):
        return self._beta

    def permutation(self, n):
        return self._perm

    def integers(self, lo, hi):
        return self._integers.pop(0)


class TestCutMix:
    def test_lambda_one_leaves_images_unchanged(self):
        images = torch.randn(4, 3, 8, 8)
        labels = torch.arange(4)
        rng = ScriptedRng(1.0, [1, 2, 3, 0], [4, 4])
        mixed, info = cutmix(images, labels, rng)
        assert torch.equal(mixed, images)
        assert info.lam == pytest.approx(1.0)

    def test_half_box_recomputes_half_lambda(self):
        images = torch.randn(3, 3, 4, 4)
        labels = torch.arange(3)
        # lam=0 -> full-size box, but centered at x=0 it clips to half width
        rng = ScriptedRng(0.0, [1, 2, 0], [2, 0])
        mixed, info = cutmix(images, labels, rng)
        assert info.lam == pytest.approx(0.5)
        top, bottom, left, right = info.box
        assert (bottom - top) * (right - left) == 8

    def test_pasted_region_matches_partner(self, rng):
        images = torch.randn(6, 3, 16, 16)
        labels = torch.arange(6)
        mixed, info = cutmix(images, labels, rng)
        top, bottom, left, right = info.box
        partner = images[torch.from_numpy(info.perm)]
        assert torch.equal(mixed[:, :, top:bottom, left:right],
                           partner[:, :, top:bottom, left:right])
        # outside the box the image is untouched
        untouched = mixed.clone()
        untouched[:, :, top:bottom, left:right] = \
            images[:, :, top:bottom, left:right]
        assert torch.equal(untouched, images)

    def test_lambda_matches_pasted_area(self, rng):
        for _ in range(10):
            images = torch.randn(4, 3, 10, 10)
            mixed, info = cutmix(images, torch.arange(4), rng)
            top, bottom, left, right = info.box
            pasted = (bottom - top) * (right - left)
            assert info.lam == pytest.approx(1.0 - pasted / 100.0)

    def test_single_image_batch_rejected(self, rng):
        with pytest.raises(DegenerateBatch):
            cutmix(torch.randn(1, 3, 8, 8), torch.zeros(1), rng)


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 0.5) == pytest.approx(0.5)
        assert cosine_lr(100, 100, 0.5, min_lr=0.01) == pytest.approx(0.01)
        assert cosine_lr(50, 100, 0.5, min_lr=0.1) == pytest.approx(0.3)

    def test_two_cycle_restart(self):
        # second cycle restarts at base lr
        assert cosine_lr(50, 100, 0.4, cycles=2) == pytest.approx(0.4)
        assert cosine_lr(25, 100, 0.4, cycles=2) == pytest.approx(0.2)
        assert cosine_lr(100, 100, 0.4, cycles=2) == pytest.approx(0.0)

    def test_out_of_range_step(self):
        with pytest.raises(RangeError):
            cosine_lr(101, 100, 0.1)
        with pytest.raises(RangeError):
            cosine_lr(-1, 100, 0.1)

    def test_invalid_cycles(self):
        with pytest.raises(RangeError):
            cosine_lr(0, 10, 0.1, cycles=3)


@settings(max_examples=40, deadline=None)
@given(step=st.integers(0, 200), total=st.integers(1, 200),
       cycles=st.sampled_from([1, 2]))
def test_cosine_lr_bounded(step, total, cycles):
    if step > total:
        return
    lr = cosine_lr(step, total, base_lr=1.0, min_lr=0.1, cycles=cycles)
    assert 0.1 - 1e-12 <= lr <= 1.0 + 1e-12


@pytest.fixture(scope="module")
def posteval_inputs(micro_splits):
    train, test = micro_splits
    cfg = SqueezeConfig(epochs=12, batch_size=32, seed=0, augmentation=MILD)
    teacher = pretrain(BackboneSpec("tiny_cnn", 10), train, cfg, test_set=test)
    distilled = init_synthetic(train, 4, "real-patch", (32, 32), seed=1)
    return teacher, distilled, test


def eval_cfg(**overrides):
    defaults = dict(epochs=2, batch_size=16, seed=0,
                    augmentation=AugmentFlags(rrc_scale=(0.5, 1.0),
                                              cutmix=True))
    defaults.update(overrides)
    return PostEvalConfig(**defaults)


class TestTrainStudent:
    def test_single_epoch_bookkeeping(self, posteval_inputs):
        teacher, distilled, test = posteval_inputs
        top1, trace = train_student(distilled, teacher, test,
                                    eval_cfg(epochs=1))
        assert len(trace.per_epoch) == 1
        row = trace.per_epoch[0]
        assert row.epoch == 0
        assert row.lr == pytest.approx(cosine_lr(0, 1, 1e-3))
        assert top1 == row.test_top1

    def test_lr_column_replays_schedule(self, posteval_inputs):
        teacher, distilled, test = posteval_inputs
        _, trace = train_student(distilled, teacher, test,
                                 eval_cfg(epochs=5, scheduler_cycles=2))
        for row in trace.per_epoch:
            assert row.lr == pytest.approx(
                cosine_lr(row.epoch, 5, 1e-3, 0.0, 2))

    def test_deterministic_per_seed(self, posteval_inputs):
        teacher, distilled, test = posteval_inputs
        a = train_student(distilled, teacher, test, eval_cfg(seed=3))
        b = train_student(distilled, teacher, test, eval_cfg(seed=3))
        assert a[0] == b[0]
        assert [r.mean_loss for r in a[1].per_epoch] == \
            [r.mean_loss for r in b[1].per_epoch]

    def test_label_mode_isolated_from_other_rng_streams(self, posteval_inputs):
        teacher, distilled, test = posteval_inputs
        _, bssl = train_student(distilled, teacher, test,
                                eval_cfg(label_mode="batch-specific"))
        _, running = train_student(distilled, teacher, test,
                                   eval_cfg(label_mode="running"))
        assert bssl.batch_order_digest == running.batch_order_digest
        assert [r.lr for r in bssl.per_epoch] == \
            [r.lr for r in running.per_epoch]

    def test_teacher_bit_identical_after_training(self, posteval_inputs):
        teacher, distilled, test = posteval_inputs
        before = model_digest(teacher.model)
        train_student(distilled, teacher, test,
                      eval_cfg(label_mode="batch-specific"))
        assert model_digest(teacher.model) == before

    def test_label_mode_validated(self):
        with pytest.raises(ConfigError):
            eval_cfg(label_mode="oracle").validate()

    def test_small_per_class_budget_shrinks_batch(self):
        from committee_distill.posteval import effective_batch_size

        cfg = PostEvalConfig(batch_size=16)
        assert effective_batch_size(cfg, images_per_class=10) == 10
        assert effective_batch_size(cfg, images_per_class=50) == 16
        explicit = PostEvalConfig(batch_size=8)
        assert effective_batch_size(explicit, images_per_class=10) == 8


class TestTrainingTrace:
    def test_csv_round_trip(self, tmp_path, posteval_inputs):
        teacher, distilled, test = posteval_inputs
        _, trace = train_student(distilled, teacher, test, eval_cfg(epochs=3))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        loaded = TrainingTrace.from_csv(path)
        assert loaded.epochs() == trace.epochs()
        for a, b in zip(loaded.per_epoch, trace.per_epoch):
            assert a.train_top1 == pytest.approx(b.train_top1)
            assert a.mean_loss == pytest.approx(b.mean_loss)
            assert a.lr == pytest.approx(b.lr)
