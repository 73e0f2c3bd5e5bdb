import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sombag.data import (
    Bag,
    DatasetError,
    ImageGroup,
    Instance,
    Kind,
    NoiseFlag,
    SynthConfig,
    area_score,
    area_scores,
    build_bags,
    ingest_jsonl,
    init_weights,
    load_dataset_dir,
    synth_generate,
    write_jsonl,
    validate_bag,
)


def make_image(i, label=0, d=4, seed=0):
    rng = np.random.default_rng(seed + i)
    return Instance(f"img_{label}_{i}", rng.normal(size=d), Kind.IMAGE)


def make_group(i, label=0, n_p=2, d=4, areas=None, seed=0):
    img = make_image(i, label, d, seed)
    rng = np.random.default_rng(1000 + seed + i)
    if areas is None:
        areas = [float(a) for a in rng.uniform(1000, 9000, size=n_p)]
    props = [
        Instance(
            f"prop_{label}_{i}_{j}",
            rng.normal(size=d),
            Kind.PROPOSAL,
            area=areas[j],
            parent_image_id=img.instance_id,
        )
        for j in range(len(areas))
    ]
    return ImageGroup(img, props)


class TestBuildBags:
    def test_standard_bag_size(self):
        groups = {0: [make_group(i, n_p=20) for i in range(4)]}
        bags = build_bags(groups, n_g=2, n_p=20, seed=0)
        assert len(bags) == 2
        assert all(b.size == 42 for b in bags)

    def test_degenerate_single_image_bags(self):
        groups = {0: [make_group(i, n_p=0) for i in range(3)]}
        bags = build_bags(groups, n_g=1, n_p=0, seed=0)
        assert len(bags) == 3
        assert all(b.size == 1 for b in bags)

    def test_small_arithmetic(self):
        groups = {1: [make_group(i, label=1, n_p=2) for i in range(3)]}
        bags = build_bags(groups, n_g=3, n_p=2, seed=0)
        assert len(bags) == 1
        assert bags[0].size == 9

    def test_class_too_small_is_an_error(self):
        groups = {0: [make_group(0)], 1: [make_group(0, label=1), make_group(1, label=1)]}
        with pytest.raises(DatasetError, match="class 0"):
            build_bags(groups, n_g=2, n_p=2, seed=0)

    def test_leftover_images_dropped(self):
        groups = {0: [make_group(i) for i in range(5)]}
        bags = build_bags(groups, n_g=2, n_p=2, seed=3)
        assert len(bags) == 2  # fifth image dropped

    def test_label_homogeneity_and_weights(self):
        groups = {
            0: [make_group(i, label=0) for i in range(4)],
            1: [make_group(i, label=1) for i in range(4)],
        }
        bags = build_bags(groups, n_g=2, n_p=2, seed=0)
        for bag in bags:
            validate_bag(bag, n_g=2, n_p=2)
            assert bag.weights.sum() == pytest.approx(1.0)

    def test_pad_duplicates_largest_proposal(self):
        g = make_group(0, n_p=2, areas=[2000.0, 5000.0])
        bags = build_bags({0: [g]}, n_g=1, n_p=4, seed=0)
        props = [i for i in bags[0].instances if i.kind is Kind.PROPOSAL]
        assert len(props) == 4
        # both padded copies are the 5000-area proposal
        assert sorted(p.area for p in props) == [2000.0, 5000.0, 5000.0, 5000.0]

    def test_truncate_drops_smallest(self):
        g = make_group(0, areas=[1000.0, 9000.0, 5000.0])
        bags = build_bags({0: [g]}, n_g=1, n_p=2, seed=0)
        props = [i for i in bags[0].instances if i.kind is Kind.PROPOSAL]
        assert sorted(p.area for p in props) == [5000.0, 9000.0]

    def test_partition_is_seeded(self):
        groups = {0: [make_group(i) for i in range(8)]}
        ids_a = [
            [i.instance_id for i in b.instances]
            for b in build_bags(groups, 2, 2, seed=5)
        ]
        ids_b = [
            [i.instance_id for i in b.instances]
            for b in build_bags(groups, 2, 2, seed=5)
        ]
        ids_c = [
            [i.instance_id for i in b.instances]
            for b in build_bags(groups, 2, 2, seed=6)
        ]
        assert ids_a == ids_b
        assert ids_a != ids_c


class TestInitWeights:
    def test_two_images(self):
        groups = {0: [make_group(i) for i in range(2)]}
        bag = build_bags(groups, n_g=2, n_p=2, seed=0)[0]
        w = init_weights(bag, n_g=2)
        for inst, wi in zip(bag.instances, w):
            assert wi == (0.5 if inst.kind is Kind.IMAGE else 0.0)

    def test_single_image(self):
        bag = build_bags({0: [make_group(0)]}, n_g=1, n_p=2, seed=0)[0]
        w = init_weights(bag, n_g=1)
        assert w[0] == 1.0 and w[1:].sum() == 0.0

    @pytest.mark.parametrize("n_g,n_p", [(1, 0), (2, 3), (4, 1)])
    def test_sums_to_one_on_images(self, n_g, n_p):
        groups = {0: [make_group(i, n_p=n_p) for i in range(n_g)]}
        bag = build_bags(groups, n_g=n_g, n_p=n_p, seed=1)[0]
        w = init_weights(bag, n_g)
        assert w.sum() == pytest.approx(1.0)
        for inst, wi in zip(bag.instances, w):
            assert (wi > 0) == (inst.kind is Kind.IMAGE)


class TestAreaScore:
    def _bag(self, areas):
        g = make_group(0, areas=areas)
        bag = Bag([g.image] + g.proposals, 0, np.array([]))
        return bag

    def test_image_scores_one(self):
        bag = self._bag([2500.0, 5000.0])
        assert area_score(bag.instances[0], bag) == 1.0

    def test_largest_proposal_scores_one(self):
        bag = self._bag([2500.0, 5000.0])
        largest = next(i for i in bag.instances if i.area == 5000.0)
        assert area_score(largest, bag) == 1.0

    def test_ratio(self):
        bag = self._bag([2500.0, 5000.0])
        smaller = next(i for i in bag.instances if i.area == 2500.0)
        assert area_score(smaller, bag) == pytest.approx(0.5)

    def test_zero_sibling_area_is_an_error(self):
        bag = self._bag([0.0, 0.0])
        with pytest.raises(DatasetError, match="zero max sibling"):
            area_score(bag.instances[1], bag)

    @given(scale=st.floats(min_value=1e-3, max_value=1e6), seed=st.integers(0, 50))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        areas = [float(a) for a in rng.uniform(100, 10000, size=4)]
        before = area_scores(self._bag(areas))
        after = area_scores(self._bag([a * scale for a in areas]))
        assert np.allclose(before, after, rtol=1e-9)

    def test_vectorized_matches_scalar(self):
        g = make_group(0, areas=[1200.0, 3400.0, 7000.0])
        bag = Bag([g.image] + g.proposals, 0, np.array([]))
        vec = area_scores(bag)
        scalar = [area_score(inst, bag) for inst in bag.instances]
        assert np.allclose(vec, scalar)


class TestSynthGenerate:
    def test_zero_rates_all_clean(self):
        cfg = SynthConfig(
            C=3, d=8, images_per_class=6, n_g=2, n_p=3,
            label_noise_rate=0.0, background_proposal_rate=0.0, seed=0,
        )
        ds = synth_generate(cfg)
        flags = {
            inst.noise_flag for bag in ds.bags for inst in bag.instances
        }
        assert flags == {NoiseFlag.CLEAN}

    def test_seed_reproducibility(self):
        cfg = SynthConfig(C=3, d=8, images_per_class=6, n_p=3, seed=9)
        a, b = synth_generate(cfg), synth_generate(cfg)
        for ba, bb in zip(a.bags, b.bags):
            assert ba.label == bb.label
            for ia, ib in zip(ba.instances, bb.instances):
                assert ia.instance_id == ib.instance_id
                assert np.array_equal(ia.feature, ib.feature)
                assert ia.noise_flag == ib.noise_flag

    def test_label_noise_rate_within_binomial_bound(self):
        cfg = SynthConfig(
            C=4, d=8, images_per_class=100, n_g=2, n_p=2,
            label_noise_rate=0.25, seed=3,
        )
        ds = synth_generate(cfg)
        n, rate = cfg.images_per_class, cfg.label_noise_rate
        sigma = np.sqrt(n * rate * (1 - rate))
        per_class = {c: 0 for c in range(cfg.C)}
        for bag in ds.bags:
            for inst in bag.instances:
                if inst.kind is Kind.IMAGE and inst.noise_flag is NoiseFlag.LABEL_NOISE:
                    per_class[bag.label] += 1
        for c, count in per_class.items():
            assert abs(count - n * rate) <= 3 * sigma

    def test_label_noise_propagates_to_proposals(self):
        cfg = SynthConfig(C=2, d=8, images_per_class=10, n_p=3,
                          label_noise_rate=0.5, seed=2)
        ds = synth_generate(cfg)
        by_parent = {}
        for bag in ds.bags:
            for inst in bag.instances:
                if inst.kind is Kind.IMAGE:
                    by_parent[inst.instance_id] = inst.noise_flag
        for bag in ds.bags:
            for inst in bag.instances:
                if inst.kind is Kind.PROPOSAL:
                    if by_parent[inst.parent_image_id] is NoiseFlag.LABEL_NOISE:
                        assert inst.noise_flag is NoiseFlag.LABEL_NOISE

    def test_bag_structure(self):
        cfg = SynthConfig(C=2, d=8, images_per_class=4, n_g=2, n_p=5, seed=0)
        ds = synth_generate(cfg)
        assert len(ds.bags) == 4
        for bag in ds.bags:
            validate_bag(bag, n_g=2, n_p=5)

    def test_proposal_areas_in_range(self):
        ds = synth_generate(SynthConfig(C=2, d=4, images_per_class=4, n_p=5, seed=0))
        for bag in ds.bags:
            for inst in bag.instances:
                if inst.kind is Kind.PROPOSAL:
                    assert 1000.0 <= inst.area <= 10000.0


class TestIngest:
    def _write(self, tmp_path, lines, name="train.jsonl"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n" if lines else "")
        return path

    def _rec(self, id, kind, label, parent=None, area=None, feature=None, bbox=None):
        return json.dumps(
            {
                "id": id, "kind": kind, "parent": parent, "label": label,
                "area": area, "feature": feature or [0.1, 0.2], "bbox": bbox,
            }
        )

    def test_small_file_arithmetic(self, tmp_path):
        lines = []
        for c in range(2):
            for i in range(2):
                img = f"i{c}{i}"
                lines.append(self._rec(img, "image", c))
                for j in range(2):
                    lines.append(
                        self._rec(f"p{c}{i}{j}", "proposal", c, parent=img, area=100.0 + j)
                    )
        ds = ingest_jsonl(self._write(tmp_path, lines), n_g=2)
        assert len(ds.bags) == 2
        assert all(b.size == 6 for b in ds.bags)
        assert ds.num_classes == 2 and ds.feature_dim == 2

    def test_empty_file(self, tmp_path):
        with pytest.raises(DatasetError, match="no records"):
            ingest_jsonl(self._write(tmp_path, []))

    def test_inconsistent_feature_length_names_line(self, tmp_path):
        lines = [
            self._rec("a", "image", 0),
            self._rec("b", "image", 0, feature=[0.1, 0.2, 0.3]),
        ]
        with pytest.raises(DatasetError, match=":2"):
            ingest_jsonl(self._write(tmp_path, lines), n_g=2)

    def test_unknown_parent(self, tmp_path):
        lines = [
            self._rec("a", "image", 0),
            self._rec("b", "image", 0),
            self._rec("p", "proposal", 0, parent="ghost", area=5.0),
        ]
        with pytest.raises(DatasetError, match="unknown image 'ghost'"):
            ingest_jsonl(self._write(tmp_path, lines), n_g=2)

    def test_malformed_json_names_line(self, tmp_path):
        lines = [self._rec("a", "image", 0), "{not json"]
        with pytest.raises(DatasetError, match=":2"):
            ingest_jsonl(self._write(tmp_path, lines))

    def test_unknown_keys_rejected(self, tmp_path):
        rec = json.loads(self._rec("a", "image", 0))
        rec["extra"] = 1
        with pytest.raises(DatasetError, match="unknown keys"):
            ingest_jsonl(self._write(tmp_path, [json.dumps(rec)]))

    def test_proposal_label_must_match_parent(self, tmp_path):
        lines = [
            self._rec("a", "image", 0),
            self._rec("p", "proposal", 1, parent="a", area=5.0),
        ]
        with pytest.raises(DatasetError, match="parent label"):
            ingest_jsonl(self._write(tmp_path, lines), n_g=1)


class TestRoundTrip:
    def test_write_then_ingest_preserves_features_and_flags(self, tmp_path):
        cfg = SynthConfig(C=3, d=8, images_per_class=6, n_g=2, n_p=3, seed=4)
        ds = synth_generate(cfg)
        counts = write_jsonl(ds, tmp_path)
        assert counts["images"] == 18 and counts["proposals"] == 54

        loaded = load_dataset_dir(tmp_path, n_g=2, seed=cfg.seed)
        assert loaded.num_classes == 3 and loaded.feature_dim == 8
        assert len(loaded.bags) == len(ds.bags)
        src = {
            i.instance_id: i for b in ds.bags for i in b.instances
        }
        for bag in loaded.bags:
            for inst in bag.instances:
                orig = src[inst.instance_id]
                assert np.array_equal(inst.feature, orig.feature)
                assert inst.noise_flag == orig.noise_flag
        assert len(loaded.test_images) == len(ds.test_images)

    def test_write_is_deterministic(self, tmp_path):
        cfg = SynthConfig(C=2, d=4, images_per_class=4, n_p=2, seed=1)
        write_jsonl(synth_generate(cfg), tmp_path / "a")
        write_jsonl(synth_generate(cfg), tmp_path / "b")
        for name in ("train.jsonl", "test.jsonl", "flags.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()
