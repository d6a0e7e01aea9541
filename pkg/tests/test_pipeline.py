import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adcc import network as net
from adcc import pipeline as P
from adcc import tensor as T
from adcc.chroma import HistogramGeometry, build_histogram, illuminant_to_uv, uv_to_illuminant
from adcc.evalkit import angular_error, gray_world
from adcc.imaging import CANONICAL, Illuminant, LinearImage
from adcc.network import ConfigError, ModelConfig

TOY = ModelConfig(block_layers=(2, 2), growth_rate=4, stem_channels=8, cbam_reduction=4, input_bins=16)
TOY_GEOM = HistogramGeometry.spanning(16)
SMALL_SCENES = P.SyntheticSceneConfig(size=(16, 24), grid=(2, 3))


class FixedRng:
    """Stand-in generator returning the top of every range."""

    def uniform(self, lo, hi, size=None):
        return np.full(size, hi) if size is not None else hi

    def integers(self, lo, hi):
        return lo


# ---------------------------------------------------------------- configs

def test_train_config_defaults():
    cfg = P.TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.lr_decay, cfg.decay_at_fraction) == (64, 1e-3, 0.1, 0.9)
    assert cfg.patches_per_image == 16 and cfg.sigma == pytest.approx(math.sqrt(2) / 2)
    with pytest.raises(ValueError):
        P.TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        P.TrainConfig(epochs=0)


def test_learning_rate_schedule():
    cfg = P.TrainConfig(epochs=10)
    assert [cfg.lr_at(e) for e in range(10)] == [1e-3] * 9 + [pytest.approx(1e-4)]
    cfg = P.TrainConfig(epochs=150)
    assert cfg.lr_at(134) == 1e-3 and cfg.lr_at(135) == pytest.approx(1e-4)


# ---------------------------------------------------------------- synthetic scenes

def test_zero_tint_scene_is_reflectance():
    cfg = P.SyntheticSceneConfig(illuminant_angle_max_deg=0, noise_sd=0)
    s = P.synth_scene(cfg, np.random.default_rng(1))
    assert s.truth == CANONICAL
    np.testing.assert_array_equal(s.image.pixels, P.mondrian(cfg, np.random.default_rng(1)))


def test_illuminant_within_cap():
    rng = np.random.default_rng(0)
    errs = [angular_error(P.random_illuminant(rng, 25.0), CANONICAL) for _ in range(10_000)]
    assert max(errs) <= 25.0 + 1e-9
    assert max(errs) > 24.0  # the cap is actually reached
    # uniform on the cap: P(angle <= t) = (1 - cos t) / (1 - cos 25deg)
    frac = np.mean(np.array(errs) <= 12.5)
    expected = (1 - math.cos(math.radians(12.5))) / (1 - math.cos(math.radians(25)))
    assert abs(frac - expected) < 0.02


def test_scene_is_tinted_reflectance():
    cfg = P.SyntheticSceneConfig(noise_sd=0)
    s = P.synth_scene(cfg, np.random.default_rng(5))
    refl = P.mondrian(cfg, np.random.default_rng(5))
    ratio = s.image.pixels / refl
    gains = ratio.reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(ratio, np.broadcast_to(gains, ratio.shape), rtol=1e-12)
    assert angular_error(gains, s.truth) < 1e-9
    assert gains.max() == pytest.approx(1.0)


def test_gray_world_many_patches():
    # the gray-world assumption holds for reflectances uniform on the cube
    cfg = P.SyntheticSceneConfig(grid=(16, 24), noise_sd=0, palette="uniform")
    errs = [angular_error(gray_world(s.image), s.truth) for s in P.synth_dataset(50, cfg, seed=3)]
    assert np.mean(errs) < 5.0


def test_checker_palette_reflectances():
    cfg = P.SyntheticSceneConfig(illuminant_angle_max_deg=0, noise_sd=0, palette_jitter=0.0)
    refl = P.mondrian(cfg, np.random.default_rng(2))
    rows, cols = cfg.grid
    h, w = cfg.size
    lo, hi = cfg.reflectance_range
    allowed = np.clip(P.CHECKER_LINEAR, lo, hi)
    for r in range(rows):
        for c in range(cols):
            cell = refl[r * h // rows : (r + 1) * h // rows, c * w // cols : (c + 1) * w // cols]
            assert np.all(cell == cell[0, 0])
            assert np.any(np.all(allowed == cell[0, 0], axis=1))
    # the palette mean is not gray, which biases gray-world estimates
    assert angular_error(P.CHECKER_LINEAR.mean(axis=0), CANONICAL) > 3.0


def test_checker_linear_values():
    assert P.srgb_to_linear(np.array([0.0, 1.0])).tolist() == [0.0, 1.0]
    assert P.srgb_to_linear(np.array([0.04045]))[0] == pytest.approx(0.04045 / 12.92)
    white = P.CHECKER_LINEAR[18]
    assert white == pytest.approx([0.8963, 0.8963, 0.8879], abs=1e-3)


def test_unknown_palette_rejected():
    with pytest.raises(ValueError):
        P.SyntheticSceneConfig(palette="munsell")


def test_synth_dataset_seeded():
    a = P.synth_dataset(3, SMALL_SCENES, seed=1)
    b = P.synth_dataset(3, SMALL_SCENES, seed=1)
    for x, y in zip(a, b):
        assert x.id == y.id and x.truth == y.truth
        np.testing.assert_array_equal(x.image.pixels, y.image.pixels)


# ---------------------------------------------------------------- patches and recolouring

def test_patch_full_scale_is_whole_image():
    img = LinearImage(np.random.default_rng(0).uniform(size=(10, 15, 3)))
    patch = P.sample_patch(img, FixedRng())
    np.testing.assert_array_equal(patch.pixels, img.pixels)


def test_patch_bounds():
    rng = np.random.default_rng(0)
    h, w = 17, 26
    img = LinearImage(np.zeros((h, w, 3)))
    for _ in range(10_000):
        s_h, s_w = rng.uniform(0.5, 1.0, size=2)
        ph, pw = int(round(h * s_h)), int(round(w * s_w))
        top, left = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
        assert 0 <= top and top + ph <= h and 0 <= left and left + pw <= w
        assert ph >= round(h / 2) and pw >= round(w / 2)
    for _ in range(500):
        p = P.sample_patch(img, rng)
        assert round(h / 2) <= p.height <= h and round(w / 2) <= p.width <= w


def test_randomize_color_fixed_multipliers():
    img = LinearImage(np.random.default_rng(1).uniform(size=(4, 4, 3)))
    L = Illuminant([0.5, 0.6, 0.7])
    same, L1 = P.randomize_color(img, L, m=(1, 1, 1))
    np.testing.assert_array_equal(same.pixels, img.pixels)
    assert L1 == L
    _, L2 = P.randomize_color(img, L, m=(0.5, 1, 1))
    np.testing.assert_allclose(L2.rgb, np.array([0.25, 0.6, 0.7]) / np.linalg.norm([0.25, 0.6, 0.7]))


def centroid(weights, geom):
    c = geom.centers()
    w = weights / weights.sum()
    return float(np.sum(w.sum(axis=1) * c)), float(np.sum(w.sum(axis=0) * c))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_recolouring_consistent_with_histogram_shift(seed):
    rng = np.random.default_rng(seed)
    s = P.synth_scene(P.SyntheticSceneConfig(noise_sd=0, reflectance_range=(0.3, 0.6)), rng)
    patch, light = P.randomize_color(s.image, s.truth, rng)
    geom = HistogramGeometry()
    du = np.subtract(centroid(build_histogram(patch, geom).weights, geom), centroid(build_histogram(s.image, geom).weights, geom))
    u0, v0 = illuminant_to_uv(s.truth)
    implied = uv_to_illuminant((u0 + du[0], v0 + du[1]))
    assert angular_error(light, implied) < geom.epsilon * math.sqrt(2) * 180 / math.pi


# ---------------------------------------------------------------- features

def test_featurize_constant_image():
    img = LinearImage(np.full((8, 12, 3), 0.4))
    f = P.featurize(img)
    geom = HistogramGeometry()
    iu, iv = geom.index(0.0, 0.0)
    assert f.shape == (2, 64, 64)
    assert f[0, iu, iv] == 1.0 and f[1, iu, iv] == pytest.approx(1.0)
    assert f.sum() == pytest.approx(2.0)


def test_featurize_empty_and_no_edge():
    img = LinearImage(np.ones((5, 5, 3)), np.zeros((5, 5), dtype=bool))
    assert not P.featurize(img).any()
    tiny = LinearImage(np.full((2, 2, 3), 0.5))
    assert P.featurize(tiny).shape == (2, 64, 64)
    f = P.featurize(LinearImage(np.random.default_rng(0).uniform(0.1, 1, size=(6, 6, 3))), edge_channel=False)
    assert f[0].sum() == pytest.approx(1.0) and not f[1].any()


# ---------------------------------------------------------------- training

def tiny_train(seed=0, epochs=3, p=1, n=8, **kw):
    data = P.synth_dataset(n, SMALL_SCENES, seed=seed)
    cfg = P.TrainConfig(epochs=epochs, patches_per_image=p, batch_size=8, seed=seed, **kw)
    return data, P.train(data, cfg, TOY)


def test_train_rejects_empty():
    with pytest.raises(ConfigError):
        P.train([], P.TrainConfig(epochs=1), TOY)


def test_train_is_deterministic(tmp_path):
    _, a = tiny_train(seed=4)
    _, b = tiny_train(seed=4)
    assert a.history == b.history
    for k, v in a.model.all_tensors().items():
        np.testing.assert_array_equal(v.data, b.model.all_tensors()[k].data)


def test_train_loss_decreases_and_logs(tmp_path):
    data = P.synth_dataset(32, SMALL_SCENES, seed=2)
    cfg = P.TrainConfig(epochs=12, patches_per_image=0, batch_size=8)
    log = tmp_path / "train.log"
    ckpt = tmp_path / "m.ckpt"
    res = P.train(data, cfg, TOY, log_path=log, checkpoint_path=ckpt)
    losses = [h[1] for h in res.history]
    assert losses[-1] < losses[0]
    lines = log.read_text().splitlines()
    assert lines[0] == "epoch, mean_loss, lr" and len(lines) == 13
    assert lines[-1].endswith("0.0001")
    loaded = net.load_model(ckpt)
    assert loaded.metadata["train.epochs"] == "12" and loaded.seed == 0


def test_train_aborts_on_nan(monkeypatch):
    def bad_loss(pred, truth):
        return T.Tensor(np.array(np.nan))

    monkeypatch.setattr(net, "loss", bad_loss)
    with pytest.raises(P.TrainingError):
        tiny_train(epochs=1)


def test_periodic_checkpoint(tmp_path, monkeypatch):
    saved = []
    real = net.save_model
    monkeypatch.setattr(net, "save_model", lambda path, model, extra=None: saved.append(path) or real(path, model, extra))
    data = P.synth_dataset(4, SMALL_SCENES)
    P.train(data, P.TrainConfig(epochs=4, patches_per_image=0, checkpoint_every=2), TOY, checkpoint_path=tmp_path / "c.ckpt")
    assert len(saved) == 3  # epochs 2 and 4, plus the final write


# ---------------------------------------------------------------- inference

def test_predict_single_properties():
    data, res = tiny_train(epochs=1)
    img = data[0].image
    a = P.predict_single(res.model, img)
    b = P.predict_single(res.model, img)
    assert a == b
    assert abs(np.linalg.norm(a.rgb) - 1) < 1e-12 and np.all(a.rgb > 0)
    # cross-module consistency: loss of the raw output equals 1 - cos(angular error)
    uv = net.predict_uv(res.model, P.featurize(img, geom=res.model.geometry)[None])
    e = angular_error(a, data[0].truth)
    assert net.loss(uv, data[0].truth).item() == pytest.approx(1 - math.cos(math.radians(e)), abs=1e-9)


def test_aggregate_zero_patches_is_single():
    data, res = tiny_train(epochs=1)
    img = data[1].image
    assert P.predict_aggregate(res.model, img, 0) == P.predict_single(res.model, img)


def test_exact_model_recovers_truth():
    L = Illuminant([0.52, 0.61, 0.6])
    uv = np.array(list(illuminant_to_uv(L)))

    def oracle(feats):
        return np.tile(uv, (len(feats), 1))

    img = LinearImage(np.random.default_rng(0).uniform(0.1, 1, size=(12, 18, 3)))
    for p in (0, 1, 4, 16):
        est = P.predict_aggregate(oracle, img, p, np.random.default_rng(p))
        np.testing.assert_allclose(est.rgb, L.rgb, atol=1e-9)


def test_aggregate_constant_and_majority():
    v = np.array([0.6, 0.6, 0.52])
    assert np.allclose(P.aggregate_candidates(np.tile(v, (5, 1))).rgb, v / np.linalg.norm(v), atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 8))
        others = rng.uniform(0.01, 5, size=(k, 3))
        cands = np.vstack([np.tile(v, (k + 1, 1)), others])
        rng.shuffle(cands)
        np.testing.assert_allclose(P.aggregate_candidates(cands).rgb, v / np.linalg.norm(v), atol=1e-12)


def test_aggregate_even_count_oracle_and_permutation():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = 2 * int(rng.integers(1, 9))
        c = rng.uniform(0.05, 1, size=(n, 3))
        s = np.sort(c, axis=0)
        med = (s[n // 2 - 1] + s[n // 2]) / 2
        got = P.aggregate_candidates(c).rgb
        np.testing.assert_allclose(got, med / np.linalg.norm(med), atol=1e-12)
        np.testing.assert_array_equal(P.aggregate_candidates(c[rng.permutation(n)]).rgb, got)


# ---------------------------------------------------------------- folds

def test_threefold_split_partition():
    ids = [f"s{i}" for i in range(50)]
    split = P.threefold_split(ids, seed=3)
    flat = [i for f in split.folds for i in f]
    assert sorted(flat) == sorted(ids) and len(flat) == len(set(flat))
    sizes = [len(f) for f in split.folds]
    assert max(sizes) - min(sizes) <= 1
    assert P.threefold_split(ids, seed=3) == split
    assert P.threefold_split(ids, seed=4) != split
    tested = [i for k in range(3) for i in split.train_test(k)[1]]
    assert sorted(tested) == sorted(ids)
    for k in range(3):
        train, test = split.train_test(k)
        assert not set(train) & set(test) and len(train) + len(test) == 50


def test_cross_validate_covers_every_id():
    data = P.synth_dataset(9, SMALL_SCENES, seed=5)
    cfg = P.TrainConfig(epochs=1, patches_per_image=0, batch_size=4)
    errors, models = P.cross_validate(data, cfg, TOY, k=3, p_test=2)
    assert sorted(errors) == sorted(s.id for s in data) and len(models) == 3
    assert all(np.isfinite(e) and e >= 0 for e in errors.values())


# ---------------------------------------------------------------- dataset layout

def test_dataset_round_trip(tmp_path):
    data = P.synth_dataset(3, SMALL_SCENES, seed=6)
    P.save_dataset(tmp_path, data)
    back = P.load_dataset(tmp_path)
    for a, b in zip(data, back):
        assert a.id == b.id
        np.testing.assert_allclose(a.truth.rgb, b.truth.rgb, atol=1e-11)
        scale = a.image.pixels.max()
        np.testing.assert_allclose(b.image.pixels * scale, a.image.pixels, atol=2e-5)


def test_dataset_masks_and_camera(tmp_path):
    data = P.synth_dataset(2, SMALL_SCENES, seed=7)
    P.save_dataset(tmp_path, data)
    (tmp_path / "masks").mkdir()
    (tmp_path / "masks" / f"{data[0].id}.txt").write_text("0 0 8 0 8 8 0 8\n")
    (tmp_path / "camera.txt").write_text("black_level_r=0\nblack_level_g=0\nblack_level_b=0\nsaturation=0.98\nbit_depth=16\n")
    back = P.load_dataset(tmp_path)
    assert not back[0].image.valid[:8, :8].any()
    assert back[1].image.valid[:8, :8].all()


def test_dataset_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        P.load_dataset(tmp_path / "nope")
