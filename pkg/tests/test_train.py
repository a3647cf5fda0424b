import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from patchwork import geometry as g
from patchwork.errors import AllMasked, NoLabels
from patchwork.geometry import AugmentParams
from patchwork.gradcheck import check
from patchwork.model import ModelSpec, PatchworkModel
from patchwork.synthetic import threshold_dataset
from patchwork.train import (Adam, BalanceSpec, Sample, TrainConfig, TrainingImage, crop_label,
                             dice_score, draw_patchset, fit, hard_mine_select, loss_bce,
                             loss_categorical, make_sample, sigmoid)
from patchwork.volume import Volume

seeds = st.integers(0, 2 ** 31)


class TestLosses:
    def test_bce_ln2(self):
        t = np.zeros((4, 4, 1))
        t[::2] = 1
        loss, _ = loss_bce(np.zeros((4, 4, 1)), t)
        assert loss == pytest.approx(np.log(2), abs=1e-9)

    def test_bce_stationary(self):
        z = np.random.default_rng(0).standard_normal((3, 3, 2))
        _, grad = loss_bce(z, sigmoid(z))
        np.testing.assert_allclose(grad, 0, atol=1e-15)

    def test_bce_large_logits_finite(self):
        loss, grad = loss_bce(np.full((2, 2, 1), 800.0), np.zeros((2, 2, 1)))
        assert loss == pytest.approx(800.0) and np.isfinite(grad).all()

    @given(seeds)
    @settings(max_examples=20)
    def test_bce_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((4, 4, 2))
        t = rng.random((4, 4, 2))
        _, grad = loss_bce(z, t)
        assert check(lambda: loss_bce(z, t)[0], z, grad) < 1e-6

    @pytest.mark.parametrize("labels", [1, 2, 4])
    def test_categorical_uniform_ln_k(self, labels):
        t = np.zeros((3, 3, labels))
        t[0, 0, 0] = 1
        loss, _ = loss_categorical(np.zeros((3, 3, labels)), t)
        assert loss == pytest.approx(np.log(labels + 1), abs=1e-12)

    def test_categorical_confident(self):
        t = np.zeros((2, 2, 2))
        t[..., 1] = 1
        z = np.where(t > 0, 20.0, -20.0)
        assert loss_categorical(z, t)[0] < 1e-8

    @given(seeds)
    @settings(max_examples=20)
    def test_categorical_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((4, 4, 3))
        lab = rng.integers(0, 4, (4, 4))
        t = np.stack([lab == c + 1 for c in range(3)], axis=-1).astype(float)
        _, grad = loss_categorical(z, t)
        assert check(lambda: loss_categorical(z, t)[0], z, grad) < 1e-6

    def test_all_masked(self):
        with pytest.raises(AllMasked):
            loss_bce(np.zeros((2, 2, 1)), np.full((2, 2, 1), np.nan))
        with pytest.raises(AllMasked):
            loss_categorical(np.zeros((2, 2, 1)), np.full((2, 2, 1), -1.0))

    @given(seeds, st.sampled_from([np.nan, -1.0]))
    @settings(max_examples=30)
    def test_dontcare_rescales_unmasked(self, seed, marker):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((5, 5, 1))
        t = (rng.random((5, 5, 1)) > 0.5).astype(float)
        mask = rng.random((5, 5, 1)) < 0.4
        mask[0, 0, 0] = False
        masked = np.where(mask, marker, t)
        _, g0 = loss_bce(z, t)
        _, g1 = loss_bce(z, masked)
        keep = ~mask
        np.testing.assert_array_equal(g1[mask], 0)
        np.testing.assert_allclose(g1[keep] * keep.sum(), g0[keep] * t.size, atol=1e-12)

    def test_dontcare_disabled(self):
        t = np.full((2, 2, 1), -1.0)
        loss, _ = loss_bce(np.zeros((2, 2, 1)), t, dontcare=False)
        assert np.isfinite(loss)


class TestDice:
    def test_perfect(self):
        t = np.zeros((4, 4, 1))
        t[:2] = 1
        assert dice_score(t, t)[0] == 1.0

    def test_disjoint(self):
        p = np.zeros((4, 4, 1))
        t = np.zeros((4, 4, 1))
        p[:2], t[2:] = 1, 1
        assert dice_score(p, t)[0] == 0.0

    def test_half(self):
        t = np.zeros((4, 4, 1))
        t[:2] = 1
        p = np.zeros((4, 4, 1))
        p[:1] = 1
        assert dice_score(p, t)[0] == pytest.approx(2 / 3)

    def test_both_empty(self):
        assert dice_score(np.zeros((3, 3, 2)), np.zeros((3, 3, 2))).tolist() == [1.0, 1.0]


def prepared(img, lab, **cfg):
    base = dict(depth=1, patch_size=4, fov_rel=4 / img.shape[0], destvox_rel=1.0, snapper=[0])
    base.update(cfg)
    return TrainingImage.prepare(img, lab, base)


class TestDrawPatchset:
    def test_uniform_centers(self):
        img = Volume(np.zeros((64, 64), np.float32), np.eye(3))
        t = prepared(img, img)
        samples = draw_patchset([t], 10_000, BalanceSpec(), AugmentParams(), np.random.default_rng(0))
        c = np.array([s.chain[-1].center_world for s in samples])
        bins = np.floor((c + 0.5) / 16).astype(int).clip(0, 3)
        counts = np.bincount(bins[:, 0] * 4 + bins[:, 1], minlength=16)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_single_voxel_forced(self):
        img = Volume(np.zeros((40, 40), np.float32), np.eye(3))
        lab = np.zeros((40, 40), np.float32)
        lab[3, 31] = 1
        t = TrainingImage.prepare(img, Volume(lab, np.eye(3)),
                                  dict(depth=2, patch_size=4, fov_rel=0.5, destvox_rel=1.0))
        samples = draw_patchset([t], 300, BalanceSpec(ratio=1.0), AugmentParams(),
                                np.random.default_rng(1))
        assert all(s.chain[-1].contains(np.array([[3.0, 31.0]]))[0] for s in samples)
        assert all(s.targets[-1].sum() >= 1 for s in samples)

    def test_autoweight_equalizes_labels(self):
        img = Volume(np.zeros((80, 80), np.float32), np.eye(3))
        lab = np.zeros((80, 80, 2), np.float32)
        lab[5:45, 5:30, 0] = 1  # volume 1000
        lab[70:72, 70:75, 1] = 1  # volume 10
        t = prepared(img, Volume(lab, np.eye(3)))
        n = 10_000
        samples = draw_patchset([t], n, BalanceSpec(ratio=1.0, autoweight=True), AugmentParams(),
                                np.random.default_rng(2))
        counts = np.array([s.labels_present for s in samples]).sum(axis=0)
        assert abs(counts[0] - counts[1]) < 0.1 * n / 2

    def test_without_autoweight_follows_volume(self):
        img = Volume(np.zeros((80, 80), np.float32), np.eye(3))
        lab = np.zeros((80, 80, 2), np.float32)
        lab[5:45, 5:30, 0] = 1
        lab[70:72, 70:75, 1] = 1
        t = prepared(img, Volume(lab, np.eye(3)))
        samples = draw_patchset([t], 2000, BalanceSpec(ratio=1.0), AugmentParams(),
                                np.random.default_rng(3))
        counts = np.array([s.labels_present for s in samples]).sum(axis=0)
        assert counts[0] > 20 * counts[1]

    def test_no_labels(self):
        img = Volume(np.zeros((16, 16), np.float32), np.eye(3))
        with pytest.raises(NoLabels):
            draw_patchset([prepared(img, img)], 1, BalanceSpec(ratio=0.5), AugmentParams(),
                          np.random.default_rng(0))

    @given(seeds, st.booleans())
    @settings(max_examples=15, deadline=None)
    def test_geometric_consistency(self, seed, independent):
        rng = np.random.default_rng(seed)
        img = Volume(rng.random((32, 32)).astype(np.float32), np.eye(3))
        lab = Volume((rng.random((32, 32)) > 0.7).astype(np.float32), np.eye(3))
        t = TrainingImage.prepare(img, lab, dict(depth=2, patch_size=8, fov_rel=0.7, destvox_rel=1.0))
        aug = AugmentParams(dphi=0.5, flip=(1, 1), dscale=(0.2, 0.2), independent=independent)
        (s,) = draw_patchset([t], 1, BalanceSpec(), aug, rng)
        for n, p in enumerate(s.chain):
            np.testing.assert_array_equal(crop_label(t, p), s.targets[n])

    def test_nan_label_becomes_dontcare(self):
        img = Volume(np.zeros((8, 8), np.float32), np.eye(3))
        lab = np.zeros((8, 8), np.float32)
        lab[2, 2] = np.nan
        t = prepared(img, Volume(lab, np.eye(3)), patch_size=8, fov_rel=1.0, snapper=[1])
        s = make_sample(t, [img.patch])
        assert np.isnan(s.targets[0][2, 2, 0]) and np.isnan(s.targets[0]).sum() == 1


def toy_model(depth=1, seed=0, **kw):
    spec = ModelSpec(ndim=2, depth=depth, input_channels=1, num_labels=1, hidden=8, dtype="float64", **kw)
    return PatchworkModel(spec, rng=np.random.default_rng(seed))


class TestFit:
    def test_threshold_toy_converges(self):
        images, labels = threshold_dataset(n=4, size=16)
        cfg = dict(depth=1, patch_size=16, fov_rel=1.0, destvox_rel=1.0, interp_type="NN")
        data = [TrainingImage.prepare(i, l, cfg) for i, l in zip(images, labels)]
        hist = fit(toy_model(), data, TrainConfig(num_its=50, epochs=1, num_patches=1, batch_size=4,
                                                  learning_rate=1e-2), np.random.default_rng(0))
        losses = [r["loss_per_level"][0] for r in hist.rows]
        assert losses[-1] < 0.1 * losses[0]
        assert hist.rows[-1]["mean_dice"] > 0.95

    def test_epochs_zero_leaves_parameters(self):
        images, labels = threshold_dataset(n=2, size=16)
        cfg = dict(depth=1, patch_size=16, fov_rel=1.0, destvox_rel=1.0)
        data = [TrainingImage.prepare(i, l, cfg) for i, l in zip(images, labels)]
        m = toy_model()
        before = {k: v.copy() for k, v in m.parameters().items()}
        fit(m, data, TrainConfig(num_its=3, epochs=0, num_patches=2), np.random.default_rng(0))
        for k, v in m.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_intermediate_loss_reaches_block0_without_final_path(self):
        images, labels = threshold_dataset(n=1, size=32)
        cfg = dict(depth=2, patch_size=8, fov_rel=0.8, destvox_rel=1.0)
        data = [TrainingImage.prepare(i, l, cfg) for i, l in zip(images, labels)]
        m = toy_model(depth=2)
        before = m.parameters()["block0.out.W"].copy()
        trained = TrainConfig(num_its=1, epochs=1, num_patches=2, intermediate_loss=True, zero_forward=True)
        fit(m, data, trained, np.random.default_rng(0))
        assert not np.array_equal(m.parameters()["block0.out.W"], before)

        m2 = toy_model(depth=2)
        before = m2.parameters()["block0.out.W"].copy()
        final_only = TrainConfig(num_its=1, epochs=1, num_patches=2, intermediate_loss=False,
                                 zero_forward=True)
        fit(m2, data, final_only, np.random.default_rng(0))
        np.testing.assert_array_equal(m2.parameters()["block0.out.W"], before)

    def test_seeded_history_reproducible(self, tmp_path):
        images, labels = threshold_dataset(n=2, size=16)
        cfg = dict(depth=1, patch_size=8, fov_rel=1.0, destvox_rel=1.0)
        data = [TrainingImage.prepare(i, l, cfg) for i, l in zip(images, labels)]
        paths = []
        for run in range(2):
            h = fit(toy_model(), data, TrainConfig(num_its=3, num_patches=3, hard_mining=0.3,
                                                   parallel=bool(run)), np.random.default_rng(7))
            paths.append(tmp_path / f"h{run}.csv")
            h.write_csv(paths[-1])
        assert paths[0].read_text() == paths[1].read_text()
        header = next(csv.reader(paths[0].open()))
        assert header == ["iteration", "mean_loss_level0", "mean_dice", "retained_hard_samples"]


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        Adam(lr=0.1).step(p, {"w": np.array([5.0, -0.01, 0.0])})
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)


def scored(losses, dice=None, present=None):
    out = []
    for i, l in enumerate(losses):
        s = Sample(chain=[], inputs=[], targets=[], ops=[], last_loss=l,
                   last_dice=dice[i] if dice else 0.0,
                   labels_present=None if present is None else np.array(present[i]))
        out.append(s)
    return out


class TestHardMining:
    def test_disabled(self):
        assert hard_mine_select(scored([1, 2]), TrainConfig(hard_mining=0)) == []

    def test_top_losses(self):
        s = scored([3, 1, 2, 0])
        kept = hard_mine_select(s, TrainConfig(hard_mining=0.5))
        assert [k.last_loss for k in kept] == [3, 2]
        assert all(k.age == 1 for k in kept)

    def test_lowest_dice(self):
        s = scored([0, 0, 0], dice=[0.9, 0.1, 0.5])
        kept = hard_mine_select(s, TrainConfig(hard_mining=0.3, hard_mining_order="f1"))
        assert [k.last_dice for k in kept] == [0.1]

    def test_rarest_label(self):
        present = [[True, False], [True, False], [True, True], [True, False]]
        s = scored([0, 0, 0, 0], present=present)
        kept = hard_mine_select(s, TrainConfig(hard_mining=0.2, hard_mining_order="balance"))
        assert kept == [s[2]]

    def test_max_age_evicts(self):
        s = scored([5, 1])
        s[0].age = 3
        kept = hard_mine_select(s, TrainConfig(hard_mining=0.5, hard_mining_maxage=3))
        assert kept == [s[1]]

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0.0, 0.99))
    def test_size_bound(self, losses, ratio):
        kept = hard_mine_select(scored(losses), TrainConfig(hard_mining=ratio))
        assert len(kept) <= ratio * len(losses) + 1
