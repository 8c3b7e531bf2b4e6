import numpy as np
import pytest
import torch
from PIL import Image

from misnet.datapipe import (AugmentationConfig, AugParams, DatasetManifest, InferenceDataset, PolypDataset,
                             augment, build_manifest, find_pairs, full_manifest, infer_dataset_id,
                             morph_jitter, replay_mask, resize_image, resize_mask, split_counts,
                             synthetic_pair, write_synthetic_corpus)
from misnet.io import read_mask


def blob_pair(rng, h=40, w=48):
    mask = np.zeros((h, w), bool)
    mask[rng.integers(2, h // 2):rng.integers(h // 2 + 2, h - 2), rng.integers(2, w // 2):rng.integers(w // 2 + 2, w - 2)] = True
    image = np.repeat(mask[..., None].astype(np.float32), 3, axis=2)
    return image, mask


class TestManifest:
    @pytest.mark.parametrize("n,counts", [(1450, (1160, 145, 145)), (10, (8, 1, 1)), (4, (4, 0, 0)),
                                          (900, (720, 90, 90)), (550, (440, 55, 55))])
    def test_split_counts(self, n, counts):
        assert split_counts(n) == counts

    def test_build_on_files(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "Kvasir", n=10, size=32)
        m = build_manifest(root, split_seed=7)
        assert m.counts == {"train": 8, "val": 1, "test": 1}
        assert m.dataset_id == "Kvasir"
        for split in ("train", "val", "test"):
            stems = [p.stem for p, _ in m.pairs(split)]
            assert stems == sorted(stems)
        for img, msk in m.pairs():
            assert img.stem == msk.stem
        assert len({img for img, _ in m.pairs()}) == 10

    def test_deterministic_and_seed_dependent(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "d", n=20, size=32)
        assert build_manifest(root, 3).to_text() == build_manifest(root, 3).to_text()
        assert build_manifest(root, 3).to_text() != build_manifest(root, 4).to_text()
        assert infer_dataset_id(root) == "custom"

    def test_text_round_trip(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "CVC-300", n=5, size=32)
        m = build_manifest(root)
        path = m.write(tmp_path / "manifest.tsv")
        again = DatasetManifest.read(path, root=root)
        assert again.entries == m.entries and again.dataset_id == "CVC-300"
        line = path.read_text().splitlines()[0]
        assert line.count("\t") == 2 and line.split("\t")[0] in ("train", "val", "test")

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("holdout\ta\tb\n")
        with pytest.raises(ValueError, match="m.tsv:1"):
            DatasetManifest.read(tmp_path / "m.tsv")

    def test_missing_pair(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "d", n=3, size=32)
        (root / "masks" / "0001.png").unlink()
        with pytest.raises(ValueError, match="0001"):
            build_manifest(root)

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        with pytest.raises(ValueError, match="no images"):
            find_pairs(tmp_path)

    def test_full_manifest_is_all_test(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "ETIS", n=3, size=32)
        assert full_manifest(root).counts == {"train": 0, "val": 0, "test": 3}


class TestAugmentationConfig:
    @pytest.mark.parametrize("kw", [dict(morph_kernel=(1, 5)), dict(morph_kernel=(2, 6)), dict(morph_kernel=(4, 3)),
                                    dict(flip_prob=1.5), dict(morph_prob=-0.1), dict(crop_fraction=0)])
    def test_invariants(self, kw):
        with pytest.raises(ValueError):
            AugmentationConfig(**kw)


class TestAugment:
    def test_disabled_is_resize_only(self, rng):
        image, mask = rng.random((40, 48, 3)).astype(np.float32), rng.random((40, 48)) < 0.3
        cfg = AugmentationConfig.disabled(train_size=32)
        img, msk, params = augment(image, mask, cfg, rng, return_params=True)
        assert params == AugParams((40, 48))
        assert np.array_equal(img, resize_image(image, (32, 32)))
        assert np.array_equal(msk, resize_mask(mask, (32, 32)))

    def test_pixel_exact_alignment_without_resampling(self):
        # 40x40 input, 32x32 crop, 32x32 output: flips and crops only, no interpolation
        cfg = AugmentationConfig(train_size=32, scale=False, crop_fraction=0.8, noise=False,
                                 contrast=False, brightness=False, sharpness=False, morphology=False)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            image, mask = blob_pair(rng, 40, 40)
            img, msk = augment(image, mask, cfg, rng)
            assert np.array_equal(img[..., 0] >= 0.5, msk)

    def test_geometric_consistency_with_replay(self):
        cfg = AugmentationConfig(train_size=32)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            image, mask = blob_pair(rng)
            img, msk, params = augment(image, mask, cfg, rng, return_params=True)
            assert msk.dtype == bool and img.shape == (32, 32, 3) and msk.shape == (32, 32)
            again = replay_mask(mask, params, (32, 32))
            union = np.count_nonzero(again | msk)
            iou = np.count_nonzero(again & msk) / union if union else 1.0
            assert iou == 1.0

    def test_image_follows_mask_under_scaling(self):
        cfg = AugmentationConfig(train_size=32, noise=False, contrast=False, brightness=False,
                                 sharpness=False, morphology=False)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            image, mask = blob_pair(rng)
            img, msk = augment(image, mask, cfg, rng)
            fg = img[..., 0] >= 0.5
            if not msk.any():
                assert not fg.any() or fg.sum() < 4
                continue
            # bilinear (image) and nearest (mask) resampling may disagree on boundary pixels only
            assert np.abs(np.mean(np.nonzero(fg), axis=1) - np.mean(np.nonzero(msk), axis=1)).max() < 1.0

    def test_horizontal_flip_mirrors_centroid(self):
        cfg = AugmentationConfig(train_size=32, scale=False, crop=False, flip_prob=1.0, noise=False,
                                 contrast=False, brightness=False, sharpness=False, morphology=False)
        mask = np.zeros((32, 32), bool)
        mask[4:10, 3:8] = True
        image = np.repeat(mask[..., None].astype(np.float32), 3, axis=2)
        img, msk, params = augment(image, mask, cfg, np.random.default_rng(0), return_params=True)
        assert params.hflip and params.vflip
        assert np.array_equal(msk, mask[::-1, ::-1])
        assert np.array_equal(img, image[::-1, ::-1])
        cols = np.nonzero(msk)[1]
        assert cols.mean() == pytest.approx(31 - np.nonzero(mask)[1].mean())

    def test_photometric_touches_only_image(self, rng):
        cfg = AugmentationConfig(train_size=32, scale=False, crop=False, flip=False, morphology=False)
        image, mask = rng.random((32, 32, 3)).astype(np.float32), rng.random((32, 32)) < 0.5
        img, msk = augment(image, mask, cfg, rng)
        assert np.array_equal(msk, mask)
        assert not np.array_equal(img, image)
        assert img.min() >= 0 and img.max() <= 1

    def test_seed_reproducible(self, rng):
        image, mask = rng.random((40, 40, 3)).astype(np.float32), rng.random((40, 40)) < 0.5
        cfg = AugmentationConfig(train_size=32)
        a = augment(image, mask, cfg, np.random.default_rng(11))
        b = augment(image, mask, cfg, np.random.default_rng(11))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_misaligned_inputs(self):
        with pytest.raises(ValueError, match="aligned"):
            augment(np.zeros((4, 4, 3)), np.zeros((5, 4), bool), AugmentationConfig(), np.random.default_rng())


class TestMorphology:
    def test_single_pixel_dilation_k3(self):
        m = np.zeros((7, 7), bool)
        m[3, 3] = True
        out = morph_jitter(m, "dilate", 3)
        expected = np.zeros((7, 7), bool)
        expected[2:5, 2:5] = True
        assert np.array_equal(out, expected)

    def test_erosion_that_empties_is_skipped(self):
        m = np.zeros((7, 7), bool)
        m[3, 3:5] = True
        assert np.array_equal(morph_jitter(m, "erode", 3), m)

    def test_erosion_shrinks(self):
        m = np.zeros((9, 9), bool)
        m[1:8, 1:8] = True
        out = morph_jitter(m, "erode", 3)
        assert out.sum() == 25 and out.dtype == bool

    def test_kernel_range_sampled(self):
        cfg = AugmentationConfig(train_size=32, morph_prob=1.0)
        seen = set()
        for seed in range(200):
            _, _, p = augment(np.zeros((32, 32, 3), np.float32), np.ones((32, 32), bool), cfg,
                              np.random.default_rng(seed), return_params=True)
            seen.add(p.morph)
        assert {k for _, k in seen} == {2, 3, 4, 5}
        assert {op for op, _ in seen} == {"dilate", "erode"}

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            morph_jitter(np.ones((3, 3), bool), "open", 3)


class TestDatasets:
    def test_mask_threshold_128(self, tmp_path):
        Image.fromarray(np.array([[127, 128, 255, 0]], np.uint8)).save(tmp_path / "m.png")
        assert read_mask(tmp_path / "m.png").tolist() == [[False, True, True, False]]

    def test_polyp_dataset_items(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "d", n=4, size=40)
        m = build_manifest(root)
        ds = PolypDataset(m.pairs("train"), 32, AugmentationConfig(train_size=32), seed=5)
        x, y, stem = ds[0]
        assert x.shape == (3, 32, 32) and x.dtype == torch.float32
        assert y.shape == (1, 32, 32) and set(y.unique().tolist()) <= {0.0, 1.0}
        assert stem == m.pairs("train")[0][0].stem

    def test_item_streams_are_order_independent(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "d", n=4, size=40)
        pairs = build_manifest(root).pairs("train")
        a = PolypDataset(pairs, 32, AugmentationConfig(train_size=32), seed=5)
        b = PolypDataset(pairs, 32, AugmentationConfig(train_size=32), seed=5)
        forward = [a[i][0] for i in range(4)]
        backward = [b[i][0] for i in reversed(range(4))][::-1]
        assert all(torch.equal(u, v) for u, v in zip(forward, backward))
        a.epoch = 1
        assert not torch.equal(a[0][0], forward[0])

    def test_inference_dataset_keeps_size(self, tmp_path):
        root = write_synthetic_corpus(tmp_path / "d", n=2, size=40)
        ds = InferenceDataset(sorted((root / "images").iterdir()), 32)
        x, stem, orig = ds[1]
        assert x.shape == (3, 32, 32) and stem == "0001" and orig.tolist() == [40, 40]

    def test_synthetic_pair(self, rng):
        img, mask = synthetic_pair(rng, 24)
        assert img.shape == (24, 24, 3) and mask.any() and not mask.all()
