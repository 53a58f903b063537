"""Augmentation, synthetic data, loaders, batching."""

import warnings

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from mvitac.data import (
    AugmentationConfig,
    PairDataset,
    PairedSample,
    SynthSpec,
    augment,
    bilinear_resize,
    compute_channel_stats,
    detect_layout,
    eval_transform,
    export_pair_layout,
    iter_batches,
    load_grasp_dataset,
    load_pair_dataset,
    make_views,
    split_seed,
    synth_generate,
    task_view,
)
from mvitac.errors import ConfigError, DatasetFormatError

DESK_AUG = dict(resize_to=36, crop_to=32)


def random_image(seed=0, channels=3, size=32):
    rng = np.random.default_rng(seed)
    return rng.random((channels, size, size)).astype(np.float32)


def make_flip_gray_detector(image):
    """Classifier for which stochastic ops fired under a deterministic crop."""
    base = augment(image, AugmentationConfig(hflip_prob=0.0, grayscale_prob=0.0,
                                             crop_scale=(1.0, 1.0), **DESK_AUG), rng_seed=0)
    flipped = base[:, :, ::-1]
    base_lum = base.mean(axis=0)
    flip_lum = flipped.mean(axis=0)

    def detect(out):
        gray = np.allclose(out[0], out[1], atol=1e-5) and \
            np.allclose(out[1], out[2], atol=1e-5)
        if gray:
            lum = out.mean(axis=0)
            return np.abs(lum - base_lum).mean() > np.abs(lum - flip_lum).mean(), True
        if np.allclose(out, base, atol=1e-4):
            return False, False
        if np.allclose(out, flipped, atol=1e-4):
            return True, False
        raise AssertionError("output matches neither orientation")

    return detect


class TestAugment:
    def test_output_size(self):
        cfg = AugmentationConfig(**DESK_AUG)
        out = augment(random_image(), cfg, rng_seed=3)
        assert out.shape == (3, 32, 32)

    def test_paper_scale_defaults(self):
        cfg = AugmentationConfig()
        assert cfg.resize_to == 256 and cfg.crop_to == 224
        assert cfg.crop_scale == (0.2, 1.0)
        assert cfg.hflip_prob == 0.5 and cfg.grayscale_prob == 0.2

    def test_deterministic_under_seed(self):
        cfg = AugmentationConfig(**DESK_AUG)
        img = random_image(5)
        a = augment(img, cfg, rng_seed=42)
        b = augment(img, cfg, rng_seed=42)
        assert a.tobytes() == b.tobytes()

    def test_seed_changes_output(self):
        cfg = AugmentationConfig(**DESK_AUG)
        img = random_image(5)
        assert augment(img, cfg, 1).tobytes() != augment(img, cfg, 2).tobytes()

    def test_flip_and_grayscale_rates(self):
        # deterministic crop so the flip/grayscale decisions stay observable
        cfg = AugmentationConfig(crop_scale=(1.0, 1.0), **DESK_AUG)
        img = random_image(7)
        detect = make_flip_gray_detector(img)
        flips = grays = 0
        n = 2000
        for seed in range(n):
            flip, gray = detect(augment(img, cfg, seed))
            flips += flip
            grays += gray
        assert abs(flips / n - 0.5) < 0.03
        assert abs(grays / n - 0.2) < 0.03

    def test_grasp_mode_forces_grayscale_off(self):
        cfg = AugmentationConfig(grasp_mode=True, **DESK_AUG)
        assert cfg.grayscale_prob == 0.0

    def test_grasp_mode_six_channels(self):
        cfg = AugmentationConfig(grasp_mode=True, **DESK_AUG)
        out = augment(random_image(channels=6), cfg, rng_seed=1)
        assert out.shape == (6, 32, 32)

    def test_normalization_applied(self):
        cfg = AugmentationConfig(normalize_mean=(0.5, 0.5, 0.5),
                                 normalize_std=(0.25, 0.25, 0.25),
                                 crop_scale=(1.0, 1.0), hflip_prob=0.0,
                                 grayscale_prob=0.0, **DESK_AUG)
        img = np.full((3, 32, 32), 0.75, dtype=np.float32)
        out = augment(img, cfg, rng_seed=0)
        np.testing.assert_allclose(out, 1.0, atol=1e-5)

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            AugmentationConfig(resize_to=16, crop_to=32)
        with pytest.raises(ConfigError):
            AugmentationConfig(hflip_prob=1.5)
        with pytest.raises(ConfigError):
            AugmentationConfig(crop_scale=(0.0, 1.0))

    def test_normalized_batch_statistics(self):
        # after normalization with dataset statistics the augmented stream
        # stays centered: per-channel mean in [-0.5, 0.5], std in [0.5, 1.5]
        dataset = synth_generate(SynthSpec(samples_per_class=32, seed=3))
        images = [s.visual for s in dataset.samples]
        mean, std = compute_channel_stats(images)
        cfg = AugmentationConfig(normalize_mean=mean, normalize_std=std, **DESK_AUG)
        draws = []
        rng = np.random.default_rng(0)
        for seed in range(1000):
            img = images[int(rng.integers(len(images)))]
            draws.append(augment(img, cfg, seed))
        batch = np.stack(draws)
        ch_mean = batch.mean(axis=(0, 2, 3))
        ch_std = batch.std(axis=(0, 2, 3))
        assert np.all(np.abs(ch_mean) < 0.5)
        assert np.all((ch_std > 0.5) & (ch_std < 1.5))


class TestBilinearResize:
    def test_identity(self):
        img = random_image(1)
        np.testing.assert_array_equal(bilinear_resize(img, 32, 32), img)

    def test_constant_preserved(self):
        img = np.full((3, 10, 10), 0.4, dtype=np.float32)
        out = bilinear_resize(img, 23, 17)
        np.testing.assert_allclose(out, 0.4, atol=1e-6)

    def test_eval_transform_deterministic(self):
        cfg = AugmentationConfig(**DESK_AUG)
        img = random_image(2)
        assert eval_transform(img, cfg).shape == (3, 32, 32)
        assert eval_transform(img, cfg).tobytes() == eval_transform(img, cfg).tobytes()


class TestMakeViews:
    def sample(self):
        return PairedSample(stem="s0", visual=random_image(1), tactile=random_image(2))

    def test_degenerate_config_collapses_views(self):
        cfg = AugmentationConfig(crop_scale=(1.0, 1.0), hflip_prob=0.0,
                                 grayscale_prob=0.0, **DESK_AUG)
        v_q, v_k, t_q, t_k = make_views(self.sample(), cfg, rng_seed=11)
        np.testing.assert_array_equal(v_q, v_k)
        np.testing.assert_array_equal(t_q, t_k)

    def test_default_config_views_differ(self):
        cfg = AugmentationConfig(**DESK_AUG)
        differing = 0
        for seed in range(100):
            v_q, v_k, _, _ = make_views(self.sample(), cfg, rng_seed=seed)
            differing += not np.array_equal(v_q, v_k)
        assert differing >= 99

    def test_sub_seeds_differ(self):
        seeds = split_seed(123, 4)
        assert len(set(seeds)) == 4

    def test_deterministic(self):
        cfg = AugmentationConfig(**DESK_AUG)
        a = make_views(self.sample(), cfg, rng_seed=5)
        b = make_views(self.sample(), cfg, rng_seed=5)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()


class TestSynthGenerate:
    def test_counts(self):
        ds = synth_generate(SynthSpec(class_count=4, samples_per_class=128, seed=0))
        assert len(ds.samples) == 512
        _, labels, classes = task_view(ds.samples, "category")
        assert len(classes) == 4
        assert np.bincount(labels).tolist() == [128] * 4

    def test_deterministic(self):
        a = synth_generate(SynthSpec(samples_per_class=8, seed=21))
        b = synth_generate(SynthSpec(samples_per_class=8, seed=21))
        for sa, sb in zip(a.samples, b.samples):
            assert sa.visual.tobytes() == sb.visual.tobytes()
            assert sa.tactile.tobytes() == sb.tactile.tobytes()
            assert sa.labels == sb.labels and sa.split == sb.split

    def test_class_count_validation(self):
        with pytest.raises(ConfigError):
            SynthSpec(class_count=1)

    def test_pixel_linear_separability_oracle(self):
        # independent oracle: plain logistic regression on raw visual pixels;
        # accuracy saturates well before full lbfgs convergence
        ds = synth_generate(SynthSpec(noise_std=0.05, seed=0))
        train = ds.train()
        x = np.stack([s.visual.reshape(-1) for s in train])
        _, y, _ = task_view(train, "category")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            clf = LogisticRegression(max_iter=100).fit(x, y)
        assert clf.score(x, y) >= 0.99

    def test_pairing_integrity(self):
        ds = synth_generate(SynthSpec(samples_per_class=8, seed=2))
        for s in ds.samples:
            assert set(s.labels) == {"category", "hard_soft", "rough_smooth"}

    def test_split_fractions(self):
        ds = synth_generate(SynthSpec(samples_per_class=100, seed=5))
        assert len(ds.train()) == 320 and len(ds.test()) == 80


class TestPairLayout:
    def test_export_load_roundtrip(self, tmp_path):
        ds = synth_generate(SynthSpec(class_count=2, samples_per_class=6, seed=7))
        export_pair_layout(ds, tmp_path)
        loaded = load_pair_dataset(tmp_path)
        assert len(loaded.samples) == 12 and loaded.skipped == 0
        by_stem = {s.stem: s for s in loaded.samples}
        for s in ds.samples:
            match = by_stem[s.stem]
            # PNG quantizes to 8 bits
            assert np.max(np.abs(match.visual - np.clip(s.visual, 0, 1))) <= 0.5 / 255 + 1e-6
            assert np.max(np.abs(match.tactile - np.clip(s.tactile, 0, 1))) <= 0.5 / 255 + 1e-6
            assert match.labels == s.labels and match.split == s.split

    def test_unpaired_stems_skipped(self, tmp_path):
        ds = synth_generate(SynthSpec(class_count=2, samples_per_class=2, seed=1))
        export_pair_layout(ds, tmp_path)
        (tmp_path / "tactile" / f"{ds.samples[0].stem}.png").unlink()
        loaded = load_pair_dataset(tmp_path)
        assert len(loaded.samples) == 3 and loaded.skipped == 1

    def test_missing_labels_csv(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_pair_dataset(tmp_path)

    def test_duplicate_stem_named(self, tmp_path):
        ds = synth_generate(SynthSpec(class_count=2, samples_per_class=2, seed=1))
        export_pair_layout(ds, tmp_path)
        labels = (tmp_path / "labels.csv").read_text().splitlines()
        labels.append(labels[1])
        (tmp_path / "labels.csv").write_text("\n".join(labels) + "\n")
        with pytest.raises(DatasetFormatError) as exc:
            load_pair_dataset(tmp_path)
        assert ds.samples[0].stem in str(exc.value)

    def test_detect_layout(self, tmp_path):
        ds = synth_generate(SynthSpec(class_count=2, samples_per_class=2, seed=1))
        export_pair_layout(ds, tmp_path)
        assert detect_layout(tmp_path) == "pair"
        with pytest.raises(DatasetFormatError):
            detect_layout(tmp_path / "visual")


def write_grasp_attempt(root, name, label="1", drop=None):
    from PIL import Image
    d = root / name
    d.mkdir(parents=True)
    rng = np.random.default_rng(hash(name) % (2**32))
    for fname in ("rgb_during.png", "tac_left_during.png", "tac_right_during.png"):
        if fname == drop:
            continue
        arr = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(d / fname)
    if label is not None:
        (d / "label.txt").write_text(label)


class TestGraspLayout:
    def test_loading_and_label_sum(self, tmp_path):
        for i in range(10):
            write_grasp_attempt(tmp_path, f"a{i:02d}", label="1" if i < 7 else "0")
        ds = load_grasp_dataset(tmp_path)
        assert len(ds.samples) == 10
        _, labels, classes = task_view(ds.samples, "grasp")
        assert classes == ["0", "1"]
        assert int(labels.sum()) == 7

    def test_stacked_tactile_has_six_channels(self, tmp_path):
        write_grasp_attempt(tmp_path, "a00")
        ds = load_grasp_dataset(tmp_path)
        assert ds.samples[0].tactile.shape[0] == 6
        assert ds.samples[0].visual.shape[0] == 3

    def test_incomplete_attempt_skipped(self, tmp_path):
        write_grasp_attempt(tmp_path, "a00")
        write_grasp_attempt(tmp_path, "a01", drop="tac_right_during.png")
        ds = load_grasp_dataset(tmp_path)
        assert len(ds.samples) == 1 and ds.skipped == 1

    def test_missing_label_is_error(self, tmp_path):
        write_grasp_attempt(tmp_path, "a00", label=None)
        with pytest.raises(DatasetFormatError):
            load_grasp_dataset(tmp_path)


class TestBatcher:
    def test_drop_last_flooring(self):
        batches = iter_batches(10, 4, shuffle_seed=0, epoch=0)
        assert [len(b) for b in batches] == [4, 4]

    def test_keep_last(self):
        batches = iter_batches(10, 4, shuffle_seed=0, epoch=0, drop_last=False)
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_deterministic_per_seed_epoch(self):
        a = iter_batches(32, 8, shuffle_seed=5, epoch=3)
        b = iter_batches(32, 8, shuffle_seed=5, epoch=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_epochs_permute_differently(self):
        orders = [np.concatenate(iter_batches(64, 8, shuffle_seed=1, epoch=e))
                  for e in range(5)]
        assert len({o.tobytes() for o in orders}) == 5

    def test_batch_size_validation(self):
        with pytest.raises(ConfigError):
            iter_batches(10, 1, shuffle_seed=0, epoch=0)
