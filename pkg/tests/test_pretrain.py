"""Tests for masking, the two pretraining losses, exact gradients and toy training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamssm import autograd as ag
from streamssm.autograd import Tensor
from streamssm.backbone import Backbone, BackboneConfig
from streamssm.data import synthetic_clip, write_tensor
from streamssm.pretrain import (
    DEFAULT_ALPHA,
    AlignStats,
    FileTeacher,
    PretrainModel,
    ReferenceTeacher,
    TrainingDiverged,
    grad_total,
    loss_align,
    loss_rec,
    loss_total,
    make_mask,
    patch_targets,
    train_toy,
)

TINY = BackboneConfig(
    frame_h=4, frame_w=4, patch_k=2, channels=8, m_spatial=1, n_temporal=1, state_dim=4,
    head_hidden=4, head_out_dim=1, max_frames=3, dtype="float64",
)


def tiny_setup(seed=0):
    teacher = ReferenceTeacher(TINY.replace(channels=4), seed=5)
    model = PretrainModel(Backbone(TINY, np.random.default_rng(seed)), teacher.dim, decoder_hidden=8, seed=seed + 1)
    video = np.random.default_rng(seed).uniform(size=(1, 3, 3, 4, 4))
    plan = make_mask(12, 0.5, seed=3, frames=3, patches=4)
    return model, teacher, video, plan


def eval_loss(model, video, plan, alpha, feats):
    with ag.no_grad():
        return loss_total(video, model, None, plan, alpha, feats)


class TestMakeMask:
    def test_count(self):
        plan = make_mask(128, 0.75, seed=0)
        assert len(plan.omega) == 96
        assert len(plan.omega_bar) == 32

    def test_partition(self):
        plan = make_mask(60, 0.4, seed=1, frames=5, patches=12)
        assert np.intersect1d(plan.omega, plan.omega_bar).size == 0
        np.testing.assert_array_equal(np.union1d(plan.omega, plan.omega_bar), np.arange(60))
        assert plan.grid.sum() == len(plan.omega)

    def test_deterministic(self):
        a = make_mask(100, 0.5, seed=7)
        b = make_mask(100, 0.5, seed=7)
        np.testing.assert_array_equal(a.omega, b.omega)
        assert not np.array_equal(a.omega, make_mask(100, 0.5, seed=8).omega)

    def test_tube(self):
        plan = make_mask(64, 0.75, seed=2, tube=True, frames=4, patches=16)
        grid = plan.grid
        for t in range(1, 4):
            np.testing.assert_array_equal(grid[t], grid[0])
        assert grid[0].sum() == 12

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.5, 1.5, 0.001, 0.999])
    def test_degenerate(self, ratio):
        with pytest.raises(ValueError):
            make_mask(16, ratio, seed=0)

    def test_grid_shape_mismatch(self):
        with pytest.raises(ValueError):
            make_mask(10, 0.5, frames=3, patches=4)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(4, 300), ratio=st.floats(0.2, 0.8), seed=st.integers(0, 999))
    def test_size_property(self, n, ratio, seed):
        plan = make_mask(n, ratio, seed)
        assert len(plan.omega) == round(ratio * n)
        assert len(plan.omega) + len(plan.omega_bar) == n


class TestLossRec:
    def setup_method(self):
        self.plan = make_mask(8, 0.5, seed=0, frames=2, patches=4)
        self.target = np.random.default_rng(0).normal(size=(1, 2, 4, 6))

    def test_perfect_reconstruction(self):
        assert loss_rec(self.target, Tensor(self.target.copy()), self.plan).item() == 0.0

    def test_golden_single_token(self):
        plan = make_mask(2, 0.5, seed=0)
        target = np.zeros((1, 1, 2, 10))
        x_hat = target.copy()
        x_hat[0, 0, plan.omega[0], :3] = [3.0, 4.0, 0.0]
        x_hat[0, 0, plan.omega_bar[0]] = 100.0
        # per-token mean square: (9 + 16) / 10
        assert loss_rec(target, x_hat, plan).item() == 2.5

    def test_unmasked_positions_ignored(self):
        x_hat = np.random.default_rng(1).normal(size=self.target.shape)
        base = loss_rec(self.target, x_hat, self.plan).item()
        flat = x_hat.reshape(1, 8, 6)
        flat[0, self.plan.omega_bar] += 50.0
        assert loss_rec(self.target, x_hat, self.plan).item() == base

    def test_coverage_mismatch(self):
        with pytest.raises(ValueError, match="cover"):
            loss_rec(self.target, np.zeros((1, 2, 4, 5)), self.plan)

    def test_nonnegative(self):
        x_hat = np.random.default_rng(2).normal(size=self.target.shape)
        assert loss_rec(self.target, x_hat, self.plan).item() >= 0


class TestLossAlign:
    def setup_method(self):
        self.plan = make_mask(12, 0.5, seed=0, frames=3, patches=4)
        self.x_t = np.random.default_rng(0).normal(size=(2, 3, 4, 5))

    def test_identical(self):
        assert loss_align(self.x_t.copy(), self.x_t, self.plan).item() == 0.0

    def test_antipodal(self):
        assert loss_align(-self.x_t, self.x_t, self.plan).item() == 2.0

    def test_scale_invariance(self):
        assert loss_align(10 * self.x_t, self.x_t, self.plan).item() == pytest.approx(0.0, abs=1e-15)

    def test_masked_positions_ignored(self):
        x_f = np.random.default_rng(1).normal(size=self.x_t.shape)
        base = loss_align(x_f, self.x_t, self.plan).item()
        x_f.reshape(2, 12, 5)[:, self.plan.omega] = 7.0
        assert loss_align(x_f, self.x_t, self.plan).item() == base

    def test_zero_vector(self):
        x_f = self.x_t.copy()
        x_f.reshape(2, 12, 5)[0, self.plan.omega_bar[0]] = 0.0
        stats = AlignStats()
        value = loss_align(x_f, self.x_t, self.plan, stats).item()
        assert stats.zero_norm == 1
        assert stats.pairs == 2 * len(self.plan.omega_bar)
        assert value == pytest.approx(1.0 / stats.pairs, rel=1e-12)

    def test_bounds_random(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x_f = rng.normal(size=self.x_t.shape)
            value = loss_align(x_f, self.x_t, self.plan).item()
            assert 0.0 <= value <= 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            loss_align(np.zeros((2, 3, 4, 6)), self.x_t, self.plan)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x_f = Tensor(rng.normal(size=self.x_t.shape), requires_grad=True)
        loss_align(x_f, self.x_t, self.plan).backward()
        eps = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 2, 3)]:
            p, m = x_f.data.copy(), x_f.data.copy()
            p[idx] += eps
            m[idx] -= eps
            fd = (loss_align(p, self.x_t, self.plan).item() - loss_align(m, self.x_t, self.plan).item()) / (2 * eps)
            assert x_f.grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


class TestLossTotal:
    def test_default_alpha(self):
        assert DEFAULT_ALPHA == 0.25

    def test_alpha_zero(self):
        model, teacher, video, plan = tiny_setup()
        out = eval_loss(model, video, plan, 0.0, teacher.features(video))
        assert out.l_total.item() == out.l_rec.item()

    def test_total_identity(self):
        model, teacher, video, plan = tiny_setup()
        out = eval_loss(model, video, plan, 0.25, teacher.features(video))
        assert out.l_total.item() == out.l_rec.item() + 0.25 * out.l_align.item()

    def test_affine_in_alpha(self):
        model, teacher, video, plan = tiny_setup()
        feats = teacher.features(video)
        values = [eval_loss(model, video, plan, a, feats).l_total.item() for a in (0.0, 0.5, 1.0)]
        assert values[1] - values[0] == pytest.approx(values[2] - values[1], rel=1e-12)

    def test_teacher_is_blind_to_mask(self):
        _, teacher, video, _ = tiny_setup()
        np.testing.assert_array_equal(teacher.features(video), teacher.features(video.copy()))
        model, _, _, _ = tiny_setup()
        a = loss_total(video, model, teacher, make_mask(12, 0.5, seed=1, frames=3, patches=4)).l_align
        b = loss_total(video, model, teacher, make_mask(12, 0.5, seed=2, frames=3, patches=4)).l_align
        assert a.item() != b.item()

    def test_teacher_dim_mismatch(self):
        model, _, video, plan = tiny_setup()
        with pytest.raises(ValueError, match="channels"):
            loss_total(video, model, None, plan, 0.25, np.zeros((1, 3, 4, 7)))

    def test_plan_mismatch(self):
        model, teacher, video, _ = tiny_setup()
        with pytest.raises(ValueError, match="plan"):
            loss_total(video, model, teacher, make_mask(16, 0.5, frames=4, patches=4))

    def test_negative_alpha(self):
        model, teacher, video, plan = tiny_setup()
        with pytest.raises(ValueError):
            loss_total(video, model, teacher, plan, -1.0)

    def test_no_teacher_gives_nan_align(self):
        model, _, video, plan = tiny_setup()
        out = eval_loss(model, video, plan, 0.25, None)
        assert np.isnan(out.l_align.item())
        assert out.l_total.item() == out.l_rec.item()

    def test_file_teacher(self, tmp_path):
        _, teacher, video, _ = tiny_setup()
        feats = teacher.features(video)
        path = write_tensor(tmp_path / "t.tensor", feats[0])
        loaded = FileTeacher([path])
        assert loaded.dim == 4
        np.testing.assert_array_equal(loaded.features(video), feats)


class TestGradTotal:
    def test_head_is_off_the_loss_path(self):
        model, teacher, video, plan = tiny_setup()
        grads = grad_total(video, model, teacher, plan, 0.25)
        for name, g in grads.items():
            if name.startswith("backbone.head."):
                assert not g.any()
        assert set(grads) == {n for n, _ in model.named_parameters()}

    def test_alpha_linearity(self):
        model, teacher, video, plan = tiny_setup()
        feats = teacher.features(video)
        g0 = grad_total(video, model, None, plan, 0.0, feats)
        g1 = grad_total(video, model, None, plan, 0.3, feats)
        g2 = grad_total(video, model, None, plan, 0.6, feats)
        for name in g0:
            np.testing.assert_allclose(g2[name] - g0[name], 2 * (g1[name] - g0[name]), rtol=0, atol=1e-8)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_gradient_names_parameter(self):
        model, teacher, video, plan = tiny_setup()
        model.decoder.fc2.bias.data[0] = np.inf
        with pytest.raises(FloatingPointError, match="parameter"):
            grad_total(video, model, teacher, plan, 0.25)

    def test_spot_finite_differences(self):
        model, teacher, video, plan = tiny_setup()
        feats = teacher.features(video)
        grads = grad_total(video, model, None, plan, 0.25, feats)
        params = dict(model.named_parameters())
        eps = 1e-5
        for name in ("mask_token", "align_head.weight", "backbone.temporal.0.branch.A_log", "backbone.pos_spatial"):
            p = params[name]
            idx = tuple(0 for _ in p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = eval_loss(model, video, plan, 0.25, feats).l_total.item()
            p.data[idx] = orig - eps
            down = eval_loss(model, video, plan, 0.25, feats).l_total.item()
            p.data[idx] = orig
            assert grads[name][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-9)


class TestTrainToy:
    def setup_method(self):
        self.config = BackboneConfig(
            frame_h=16, frame_w=16, patch_k=4, channels=16, m_spatial=1, n_temporal=1, state_dim=4, head_hidden=8
        )
        self.clip = synthetic_clip(0, frames=3, height=16, width=16)
        self.teacher = ReferenceTeacher(self.config.replace(channels=8), seed=1)

    def model(self):
        return PretrainModel(Backbone(self.config, np.random.default_rng(0)), self.teacher.dim, seed=0)

    def test_zero_lr_is_flat(self):
        traj = train_toy(self.model(), self.teacher, [self.clip], steps=4, lr=0.0)
        assert len({row["l_total"] for row in traj}) == 1

    @pytest.mark.parametrize("optimizer", ["adamw", "momentum", "sgd"])
    def test_loss_decreases(self, optimizer):
        lr = {"adamw": 3e-3, "momentum": 0.05, "sgd": 0.3}[optimizer]
        traj = train_toy(self.model(), self.teacher, [self.clip], steps=30, lr=lr, optimizer=optimizer)
        assert traj[-1]["l_total"] < traj[0]["l_total"]

    def test_alpha_zero_has_no_align_column(self):
        traj = train_toy(self.model(), self.teacher, [self.clip], steps=2, lr=1e-3, alpha=0.0)
        assert all("l_align" not in row for row in traj)
        traj = train_toy(self.model(), self.teacher, [self.clip], steps=2, lr=1e-3, alpha=0.25)
        assert all(np.isfinite(row["l_align"]) for row in traj)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_partial_trajectory(self):
        with pytest.raises(TrainingDiverged) as info:
            train_toy(self.model(), self.teacher, [self.clip], steps=50, lr=1e6, optimizer="sgd")
        assert isinstance(info.value.trajectory, list)
        assert len(info.value.trajectory) < 50

    def test_seed_reproducible(self):
        config = self.config.replace(dtype="float64")
        runs = []
        for _ in range(2):
            model = PretrainModel(Backbone(config, np.random.default_rng(0)), self.teacher.dim, seed=0)
            runs.append(train_toy(model, self.teacher, [self.clip], steps=5, lr=1e-3))
        assert runs[0] == runs[1]

    def test_needs_clip(self):
        with pytest.raises(ValueError):
            train_toy(self.model(), self.teacher, [], steps=1)

    def test_patch_targets_shape(self):
        assert patch_targets(self.clip[None], self.config).shape == (1, 3, 16, 48)
