import json

import numpy as np
import pytest

from sfda.dataset import (
    SceneSpec,
    ShiftParams,
    TARGET_SHIFT,
    DatasetManifest,
    build_dataset,
    build_domain_pair,
    generate_scene,
    load_batch,
    load_split,
    sample_seed,
    source_spec,
    target_spec,
)


class TestSceneSpec:
    def test_rejects_one_class(self):
        with pytest.raises(ValueError):
            SceneSpec(num_classes=1).validate()

    def test_rejects_nonpositive_size(self):
        with pytest.raises(ValueError):
            SceneSpec(image_height=0).validate()

    def test_source_must_be_unshifted(self):
        with pytest.raises(ValueError):
            SceneSpec(domain_id="source", shift=TARGET_SHIFT).validate()

    def test_divisors(self):
        source_spec(5, 64).validate((8, 4))
        with pytest.raises(ValueError, match="divisible by 3"):
            source_spec(5, 64).validate((3,))

    def test_dict_round_trip(self):
        spec = target_spec(6, 48, ShiftParams(10.0, 0.1, 2.0))
        assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestGenerateScene:
    def test_deterministic(self):
        a, b = generate_scene(7, target_spec()), generate_scene(7, target_spec())
        assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)

    def test_shift_changes_image_only(self):
        a, b = generate_scene(7, source_spec()), generate_scene(7, target_spec())
        assert np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.image, b.image)

    def test_ranges_and_dtypes(self):
        s = generate_scene(3, target_spec(5, 32))
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
        assert s.labels.shape == (32, 32) and s.labels.dtype == np.int64
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        # images are stored as 8-bit rasters, so they are quantized at generation
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)

    def test_two_classes(self):
        s = generate_scene(0, source_spec(2, 16))
        assert set(np.unique(s.labels)) <= {0, 1}

    def test_class_coverage_1000_samples(self):
        spec = source_spec(5, 64)
        full = 0
        for i in range(1000):
            labels = generate_scene(sample_seed(11, i), spec).labels
            assert labels.min() >= 0 and labels.max() <= 4
            full += len(np.unique(labels)) == 5
        assert full / 1000 >= 0.90

    def test_domain_gap_visible(self):
        # mean colour of class 0 moves under the target shift
        a, b = generate_scene(1, source_spec()), generate_scene(1, target_spec())
        m = a.labels == 0
        assert np.abs(a.image[:, m].mean(1) - b.image[:, m].mean(1)).max() > 0.02


class TestBuildAndLoad:
    def test_empty(self, tmp_path):
        man = build_dataset(0, source_spec(), 0, tmp_path)
        assert man.count == 0 and man.images == []
        again = DatasetManifest.load(tmp_path / "source")
        assert again.count == 0
        x, y = load_split(again)
        assert x.shape == (0, 3, 64, 64) and y.shape == (0, 64, 64)

    def test_ten_files(self, tmp_path):
        man = build_dataset(10, target_spec(4, 32), 1, tmp_path, split="t")
        assert man.count == 10
        assert len(list((tmp_path / "t" / "images").glob("*.png"))) == 10
        assert len(list((tmp_path / "t" / "labels").glob("*.png"))) == 10
        assert json.loads((tmp_path / "t" / "manifest.json").read_text())["count"] == 10

    def test_round_trip(self, tmp_path):
        spec = target_spec(4, 32)
        man = DatasetManifest.load(build_dataset(6, spec, 2, tmp_path).save())
        assert man.spec == spec and man.seed == 2
        x, y = load_split(man)
        for i in range(6):
            s = generate_scene(sample_seed(2, i), spec)
            assert np.array_equal(x[i], s.image)
            assert np.array_equal(y[i], s.labels)

    def test_same_bytes_on_disk(self, tmp_path):
        build_dataset(3, target_spec(4, 16), 9, tmp_path / "a")
        build_dataset(3, target_spec(4, 16), 9, tmp_path / "b")
        for rel in ("images/00002.png", "labels/00001.png"):
            assert (tmp_path / "a/target" / rel).read_bytes() == (tmp_path / "b/target" / rel).read_bytes()

    def test_overwrite_requires_force(self, tmp_path):
        build_dataset(1, source_spec(3, 16), 0, tmp_path)
        with pytest.raises(FileExistsError):
            build_dataset(1, source_spec(3, 16), 0, tmp_path)
        assert build_dataset(2, source_spec(3, 16), 0, tmp_path, force=True).count == 2

    def test_load_batch_examples(self, tmp_path):
        man = build_dataset(5, source_spec(3, 16), 4, tmp_path)
        x, y = load_batch(man, [3])
        assert x.shape == (1, 3, 16, 16)
        assert np.array_equal(y[0], generate_scene(sample_seed(4, 3), man.spec).labels)
        x, y = load_batch(man, [1, 1])
        assert np.array_equal(x[0], x[1]) and np.array_equal(y[0], y[1])

    def test_permutation_matches_single_loads(self, tmp_path, rng):
        man = build_dataset(8, target_spec(4, 16), 4, tmp_path)
        perm = list(rng.permutation(8))
        x, y = load_batch(man, perm)
        for j, i in enumerate(perm):
            xi, yi = load_batch(man, [i])
            assert np.array_equal(x[j], xi[0]) and np.array_equal(y[j], yi[0])

    def test_index_out_of_range(self, tmp_path):
        man = build_dataset(2, source_spec(3, 16), 0, tmp_path)
        with pytest.raises(IndexError):
            load_batch(man, [2])
        with pytest.raises(IndexError):
            load_batch(man, [-1])

    def test_corrupt_file(self, tmp_path):
        man = build_dataset(2, source_spec(3, 16), 0, tmp_path)
        (man.split_dir / man.images[1]).write_bytes(b"not a png")
        with pytest.raises(ValueError, match="corrupt"):
            load_batch(man, [1])

    def test_manifest_count_mismatch(self, tmp_path):
        man = build_dataset(2, source_spec(3, 16), 0, tmp_path)
        d = json.loads((man.split_dir / "manifest.json").read_text())
        d["count"] = 3
        (man.split_dir / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(ValueError):
            DatasetManifest.load(man.split_dir)


def test_domain_pair(tiny_data):
    root, mans = tiny_data
    assert set(mans) == {"source_train", "source_test", "target_train", "target_test"}
    assert mans["source_train"].spec.domain_id == "source"
    assert mans["target_test"].spec.shift == TARGET_SHIFT
    assert mans["target_train"].count == 16 and mans["target_test"].count == 8
    # train and test draws are distinct
    xs, _ = load_batch(mans["target_train"], [0])
    xt, _ = load_batch(mans["target_test"], [0])
    assert not np.array_equal(xs, xt)
