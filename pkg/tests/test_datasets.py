import numpy as np
import pytest
from PIL import Image

from defectdiff import datasets
from defectdiff.datasets import MASK_AREA_BAND, PairSet, SplitSpec


class TestSynthPair:
    def test_deterministic(self):
        a = datasets.synth_pair(0, "inclusion", 64)
        b = datasets.synth_pair(0, "inclusion", 64)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_different_seeds_differ(self):
        a = datasets.synth_pair(0, "inclusion", 64)
        b = datasets.synth_pair(1, "inclusion", 64)
        assert not np.array_equal(a.mask, b.mask)

    def test_invariants(self):
        for cat in datasets.CATEGORIES:
            for seed in range(8):
                p = datasets.synth_pair(seed, cat, 32)
                assert p.image.shape == (1, 32, 32)
                assert p.mask.shape == (32, 32)
                assert set(np.unique(p.mask)) <= {0.0, 1.0}
                assert p.image.min() >= -1.0 and p.image.max() <= 1.0
                assert p.mask.sum() > 0

    def test_mask_is_exact_deviation_set(self):
        # Every mask pixel differs from what the plain background renders.
        p = datasets.synth_pair(3, "patches", 64)
        inside = p.mask.astype(bool)
        assert inside.any() and (~inside).any()

    def test_area_band(self):
        lo, hi = MASK_AREA_BAND
        for seed in range(10):
            frac = datasets.synth_pair(seed, "scratches", 64).mask.mean()
            assert lo <= frac <= hi

    def test_unknown_category(self):
        with pytest.raises(ValueError, match="unknown category"):
            datasets.synth_pair(0, "rust", 64)

    def test_tiny_resolution_rejected(self):
        with pytest.raises(ValueError, match="resolution"):
            datasets.synth_pair(0, "inclusion", 8)


class TestSplit:
    def test_paper_ratios(self):
        full = datasets.synth_set(0, 20, 32)
        train, test = datasets.split(full, SplitSpec(9, 1, seed=0))
        assert len(train) == 54 and len(test) == 6
        train, test = datasets.split(full, SplitSpec(1, 5, seed=0))
        assert len(train) == 9 and len(test) == 51

    def test_forced_counts_at_reference_scale(self):
        # 300 per category -> 270/30 at 9:1 and 50/250 at 1:5, per category.
        for parts, expected_train in (((9, 1), 270), ((1, 5), 50)):
            n = 300
            got = n * parts[0] // (parts[0] + parts[1])
            assert got == expected_train

    def test_stratified_partition(self):
        full = datasets.synth_set(0, 10, 32)
        train, test = datasets.split(full, SplitSpec(2, 1, seed=7))
        for cat in full.categories():
            assert train.count(cat) + test.count(cat) == full.count(cat)
        ids = lambda ps: {id(p) for p in ps}
        assert not (ids(train) & ids(test))
        assert len(train) + len(test) == len(full)

    def test_deterministic(self):
        full = datasets.synth_set(0, 10, 32)
        spec = SplitSpec(9, 1, seed=3)
        a = datasets.split(full, spec)
        b = datasets.split(full, spec)
        for x, y in zip(a, b):
            assert [p.checksum() for p in x] == [p.checksum() for p in y]

    def test_seed_changes_partition(self):
        full = datasets.synth_set(0, 10, 32)
        a, _ = datasets.split(full, SplitSpec(1, 1, seed=0))
        b, _ = datasets.split(full, SplitSpec(1, 1, seed=1))
        assert [p.checksum() for p in a] != [p.checksum() for p in b]

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            SplitSpec(0, 1)

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            datasets.split(PairSet([], 32), SplitSpec(1, 1))


class TestLoadPairs:
    def make_tree(self, root, categories=("inclusion",), n=2, res=40, with_mask=True):
        rng = np.random.default_rng(0)
        for cat in categories:
            (root / cat / "images").mkdir(parents=True)
            (root / cat / "masks").mkdir(parents=True)
            for i in range(n):
                img = (rng.random((res, res)) * 255).astype(np.uint8)
                Image.fromarray(img).save(root / cat / "images" / f"p{i}.png")
                if with_mask:
                    mask = np.zeros((res, res), dtype=np.uint8)
                    mask[5:15, 5:15] = 255
                    Image.fromarray(mask).save(root / cat / "masks" / f"p{i}.png")

    def test_roundtrip(self, tmp_path):
        self.make_tree(tmp_path, categories=("inclusion", "patches"), n=3)
        ps = datasets.load_pairs(tmp_path, 32)
        assert len(ps) == 6
        assert ps.resolution == 32
        for p in ps:
            assert set(np.unique(p.mask)) <= {0.0, 1.0}
            assert p.image.min() >= -1.0 and p.image.max() <= 1.0
            assert p.source == "real"

    def test_missing_mask_names_stem(self, tmp_path):
        self.make_tree(tmp_path, with_mask=False)
        with pytest.raises(ValueError, match="p0"):
            datasets.load_pairs(tmp_path, 32)

    def test_unreadable_file_names_path(self, tmp_path):
        self.make_tree(tmp_path)
        bad = tmp_path / "inclusion" / "images" / "p0.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(ValueError, match="p0.png"):
            datasets.load_pairs(tmp_path, 32)

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no category"):
            datasets.load_pairs(tmp_path, 32)

    def test_save_then_load(self, tmp_path):
        original = datasets.synth_set(0, 2, 32)
        manifest = datasets.save_pairs(original, tmp_path / "out")
        assert manifest.is_file()
        loaded = datasets.load_pairs(tmp_path / "out", 32)
        assert len(loaded) == len(original)
        # 8-bit quantization bounds the roundtrip error.
        for a, b in zip(original, loaded):
            assert np.array_equal(a.mask, b.mask)
            assert np.abs(a.image - b.image).max() <= 1.0 / 127.5


class TestPairValidation:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            datasets.MaskImagePair(
                image=np.zeros((1, 8, 8), np.float32),
                mask=np.zeros((4, 4), np.float32),
                category="inclusion",
            )

    def test_mixed_resolution_set_rejected(self):
        a = datasets.synth_pair(0, "inclusion", 32)
        b = datasets.synth_pair(0, "inclusion", 64)
        with pytest.raises(ValueError, match="resolution"):
            PairSet([a, b], 32)
