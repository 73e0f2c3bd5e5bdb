import numpy as np
import pytest

from sombag.data import Kind, SynthConfig, synth_generate
from sombag.memory import init_memory
from sombag.trainer import (
    TrainConfig,
    TrainingDiverged,
    apply_ablation,
    bag_feature,
    compute_roi_weights,
    curriculum_stages,
    default_grid_w,
    predict,
    top_m_count,
    train,
    warmup,
)


def small_dataset(C=3, seed=0, sep=5.0, images=12, label_noise=0.0, bg=0.0):
    return synth_generate(
        SynthConfig(
            C=C, d=8, images_per_class=images, n_g=2, n_p=3,
            label_noise_rate=label_noise, background_proposal_rate=bg,
            class_separation=sep, seed=seed,
        )
    )


def small_config(**kw):
    defaults = dict(
        n_g=2, n_p=3, grid_w=4, warmup_epochs_cls=3, warmup_epochs_mem=3,
        epochs_per_stage=1, batch_size=8, seed=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestBagFeature:
    def _bag(self, ds):
        return ds.bags[0]

    def test_one_hot_selects_instance(self):
        bag = self._bag(small_dataset())
        w = np.zeros(bag.size)
        w[3] = 1.0
        assert np.array_equal(bag_feature(bag, w), bag.instances[3].feature)

    def test_uniform_over_identical_features(self):
        bag = self._bag(small_dataset())
        v = np.arange(8.0)
        for inst in bag.instances:
            inst.feature = v
        w = np.full(bag.size, 1.0 / bag.size)
        assert np.allclose(bag_feature(bag, w), v)

    def test_half_half(self):
        bag = self._bag(small_dataset())
        e1, e2 = np.eye(8)[0], np.eye(8)[1]
        bag.instances[0].feature = e1
        bag.instances[1].feature = e2
        w = np.zeros(bag.size)
        w[0] = w[1] = 0.5
        assert np.allclose(bag_feature(bag, w), 0.5 * (e1 + e2))

    def test_all_zero_weights_rejected(self):
        bag = self._bag(small_dataset())
        with pytest.raises(ValueError):
            bag_feature(bag, np.zeros(bag.size))


class TestCurriculum:
    def test_standard_schedule(self):
        cfg = TrainConfig()
        assert curriculum_stages(cfg) == [0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40]

    def test_single_stage_when_start_equals_end(self):
        cfg = TrainConfig(p_start=0.40, p_end=0.40)
        assert curriculum_stages(cfg) == [0.40]

    def test_strictly_increasing(self):
        stages = curriculum_stages(TrainConfig())
        assert all(b > a for a, b in zip(stages, stages[1:]))
        assert stages[-1] <= 0.40

    def test_invalid_range_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(p_start=0.5, p_end=0.4)

    def test_top_m_counts_for_standard_bag(self):
        expected = {0.10: 5, 0.15: 7, 0.20: 9, 0.25: 11, 0.30: 13, 0.35: 15, 0.40: 17}
        for p, m in expected.items():
            assert top_m_count(p, 42) == m

    def test_top_m_exact_product_not_inflated(self):
        # 0.2 * 5 is 1.0000000000000002 in floats; must stay 1
        assert top_m_count(0.2, 5) == 1
        assert top_m_count(0.25, 4) == 1

    def test_default_grid_heuristic(self):
        assert default_grid_w(10) == 10
        assert default_grid_w(14) == 12
        assert default_grid_w(2) == 5


class TestComputeRoiWeights:
    def _setup(self, seed=0):
        ds = small_dataset(seed=seed)
        mem = init_memory(8, 3, 4, rng=np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 1)
        mem.D = rng.uniform(0.1, 1.0, size=mem.D.shape)
        mem.D /= mem.D.sum(axis=0, keepdims=True)
        mem.R = rng.uniform(0.1, 1.0, size=mem.R.shape)
        mem.R /= mem.R.sum(axis=1, keepdims=True)
        return ds, mem

    def test_nonzero_count_and_sum(self):
        ds, mem = self._setup()
        bag = ds.bags[0]
        w, fb = compute_roi_weights(bag, mem, 0.25)
        assert not fb
        assert np.count_nonzero(w) == top_m_count(0.25, bag.size)
        assert w.sum() == pytest.approx(1.0)

    def test_all_toggles_off_gives_uniform_head(self):
        ds, mem = self._setup()
        bag = ds.bags[0]
        w, _ = compute_roi_weights(bag, mem, 0.5, use_d=False, use_r=False, use_a=False)
        m = top_m_count(0.5, bag.size)
        assert np.allclose(w[:m], 1.0 / m)
        assert np.all(w[m:] == 0.0)

    def test_constructed_memory_selects_matching_cluster(self):
        ds, mem = self._setup()
        bag = ds.bags[0]
        y = bag.label
        # only cluster 3 has a positive prototypical score for this label,
        # and its key is planted on an instance so it surely wins something
        mem.K[:, 3] = bag.instances[0].feature
        mem.D[y, :] = 0.0
        mem.D[y, 3] = 0.9
        mem.R[y, :] = 0.0
        mem.R[y, 3] = 1.0
        feats = np.stack([i.feature for i in bag.instances])
        from sombag.memory import winners_batch

        z = winners_batch(feats, mem.K)
        assert np.any(z == 3)
        w, fb = compute_roi_weights(bag, mem, 1.0, use_a=False)
        assert not fb
        assert np.all((w > 0) == (z == 3))

    def test_fallback_to_initial_weights(self):
        ds, mem = self._setup()
        bag = ds.bags[0]
        mem.D[bag.label, :] = 0.0
        w, fb = compute_roi_weights(bag, mem, 0.25)
        assert fb
        for inst, wi in zip(bag.instances, w):
            assert (wi > 0) == (inst.kind is Kind.IMAGE)

    def test_at_most_m_nonzeros_randomized(self):
        for seed in range(10):
            ds, mem = self._setup(seed)
            rng = np.random.default_rng(100 + seed)
            mem.D = rng.uniform(0.0, 1.0, size=mem.D.shape)  # zeros possible
            p = float(rng.uniform(0.05, 1.0))
            bag = ds.bags[int(rng.integers(len(ds.bags)))]
            w, fb = compute_roi_weights(bag, mem, p)
            assert np.count_nonzero(w) <= top_m_count(p, bag.size)
            assert w.sum() == pytest.approx(1.0)


class TestWarmup:
    def test_separable_warmup_reaches_accuracy(self):
        ds = small_dataset(sep=6.0)
        state = warmup(ds, small_config(warmup_epochs_cls=10))
        from sombag.model import classify

        correct = 0
        for bag, w in zip(state.work.bags, state.weights):
            x = bag_feature(bag, w, state.model)
            correct += int(np.argmax(classify(state.model, x))) == bag.label
        assert correct / len(state.work.bags) > 0.9

    def test_memory_invariants_after_warmup(self):
        from sombag.memory import check_simplex_invariants

        state = warmup(small_dataset(), small_config())
        check_simplex_invariants(state.memory)

    def test_warmup_reproducible(self):
        ds = small_dataset(seed=5)
        cfg = small_config(seed=5)
        a = warmup(ds, cfg)
        b = warmup(ds, cfg)
        assert np.array_equal(a.model.cls_w, b.model.cls_w)
        assert np.array_equal(a.memory.K, b.memory.K)


class TestTrain:
    def test_p_trace(self):
        ds = small_dataset()
        _, report = train(ds, small_config())
        assert report.p_trace == [0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40]

    def test_without_proposals_runs(self):
        ds = small_dataset(label_noise=0.2)
        cfg = apply_ablation(small_config(), "no_roi")
        state, report = train(ds, cfg)
        assert all(b.size == cfg.n_g for b in state.work.bags)
        assert report.test_top1 is not None

    def test_determinism(self):
        ds = small_dataset(seed=3, label_noise=0.2, bg=0.3)
        cfg = small_config(seed=3)
        _, r1 = train(ds, cfg)
        _, r2 = train(ds, cfg)
        assert r1.to_dict() == r2.to_dict()

    def test_weight_invariants_after_refresh(self):
        ds = small_dataset(label_noise=0.2, bg=0.3)
        state, report = train(ds, small_config())
        m = top_m_count(report.p_trace[-1], state.work.bags[0].size)
        for w in state.weights:
            assert np.count_nonzero(w) <= m
            assert w.sum() == pytest.approx(1.0)
            assert np.all(w >= 0)

    def test_uniform_mode_never_refreshes(self):
        ds = small_dataset(label_noise=0.3, bg=0.3)
        cfg = apply_ablation(small_config(), "uniform")
        state, report = train(ds, cfg)
        n_b = state.work.bags[0].size
        for w in state.weights:
            assert np.allclose(w, 1.0 / n_b)
        assert report.noise_auc == pytest.approx(0.5)

    def test_kmeans_memory_mode_runs(self):
        ds = small_dataset(label_noise=0.2)
        cfg = apply_ablation(small_config(), "kmeans")
        state, report = train(ds, cfg)
        from sombag.memory import check_simplex_invariants

        check_simplex_invariants(state.memory)
        assert report.test_top1 is not None

    def test_no_som_sets_winner_only_updates(self):
        cfg = apply_ablation(small_config(), "no_som")
        assert cfg.effective_delta == 0
        ds = small_dataset()
        state, _ = train(ds, cfg)
        assert state.memory.delta == 0

    def test_divergence_aborts_with_snapshot(self):
        ds = small_dataset()
        ds.bags[0].instances[0].feature = np.full(8, np.nan)
        with pytest.raises(TrainingDiverged) as err:
            train(ds, small_config())
        assert "loss" in err.value.snapshot

    def test_repartition_flag_runs(self):
        ds = small_dataset(label_noise=0.1)
        cfg = small_config(repartition_each_epoch=True)
        _, report = train(ds, cfg)
        assert report.test_top1 is not None

    def test_fixed_p_epoch_budget_matches_curriculum(self):
        cfg = apply_ablation(small_config(epochs_per_stage=2), "fixed_p")
        assert cfg.p_start == cfg.p_end == 0.40
        assert cfg.epochs_per_stage == 2 * 7


class TestPredict:
    def test_memory_independence(self):
        ds = small_dataset()
        state, _ = train(ds, small_config())
        before = predict(state, ds.test_images)
        state.memory.K[:] = 0.0  # destroy the memory entirely
        state.memory.D[:] = 0.0
        after = predict(state, ds.test_images)
        assert np.array_equal(before, after)

    def test_uniform_classifier_predicts_class_zero(self):
        ds = small_dataset()
        state = warmup(ds, small_config())
        state.model.cls_w[:] = 0.0
        state.model.cls_b[:] = 0.0
        preds = predict(state, ds.test_images)
        assert np.all(preds == 0)

    def test_separable_data_fully_learned(self):
        ds = small_dataset(sep=6.0)
        state, report = train(ds, small_config())
        assert report.test_top1 == 1.0
