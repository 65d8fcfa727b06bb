import math

import numpy as np
import pytest
from scipy.stats import chisquare

from fodkit import net as N
from fodkit import sh, trainer


def smooth_volume(rng, dims=(24, 24, 24), channels=15, scale=0.3):
    """Spatially smooth random coefficient raster (separable smoothing)."""
    v = rng.standard_normal(dims + (channels,))
    for ax in range(3):
        v = 0.5 * v + 0.25 * (np.roll(v, 1, axis=ax) + np.roll(v, -1, axis=ax))
    return (scale * v).astype(np.float32)


@pytest.fixture()
def toy_scene():
    rng = np.random.default_rng(0)
    target = smooth_volume(rng)
    noise = 0.05 * rng.standard_normal(target.shape).astype(np.float32)
    mask = np.zeros((24, 24, 24), bool)
    mask[4:20, 4:20, 4:20] = True
    return trainer.TrainScene("toy", target + noise, target, mask)


# ---------------------------------------------------------------------------
# patch sampling


def test_single_voxel_mask_pins_origin():
    rng = np.random.default_rng(1)
    vol = np.zeros((64, 64, 64, 15), np.float32)
    mask = np.zeros((64, 64, 64), bool)
    mask[32, 32, 32] = True
    pairs = trainer.sample_patches(vol, vol, mask, 5, 32, rng)
    assert all(p.origin == (32, 32, 32) for p in pairs)


def test_patch_count_and_bounds():
    rng = np.random.default_rng(2)
    vol = np.random.default_rng(3).standard_normal((48, 48, 48, 15)).astype(np.float32)
    mask = np.ones((48, 48, 48), bool)
    pairs = trainer.sample_patches(vol, vol, mask, 40, 32, rng)
    assert len(pairs) == 40
    for p in pairs:
        assert p.input.shape == (15, 32, 32, 32)
        ox, oy, oz = p.origin
        assert 16 <= ox <= 32 and 16 <= oy <= 32 and 16 <= oz <= 32
        lo = 16
        assert np.array_equal(p.input,
                              np.moveaxis(vol[ox-lo:ox+16, oy-lo:oy+16, oz-lo:oz+16], -1, 0))


def test_origin_uniformity_chi_squared():
    rng = np.random.default_rng(4)
    vol = np.zeros((40, 40, 40, 2), np.float32)
    mask = np.zeros((40, 40, 40), bool)
    mask[20, 20, 20] = True
    mask[21, 20, 20] = True
    pairs = trainer.sample_patches(vol, vol, mask, 10_000, 8, rng)
    counts = [sum(1 for p in pairs if p.origin == (20, 20, 20)),
              sum(1 for p in pairs if p.origin == (21, 20, 20))]
    assert sum(counts) == 10_000
    assert chisquare(counts).pvalue > 0.001


def test_sampling_errors():
    rng = np.random.default_rng(5)
    vol = np.zeros((16, 16, 16, 3), np.float32)
    with pytest.raises(ValueError, match="patch size"):
        trainer.sample_patches(vol, vol, np.ones((16,) * 3, bool), 1, 32, rng)
    with pytest.raises(ValueError, match="no valid patch origin"):
        trainer.sample_patches(vol, vol, np.zeros((16,) * 3, bool), 1, 8, rng)


# ---------------------------------------------------------------------------
# rotation augmentation


def _random_pair(rng, patch=8):
    a = rng.standard_normal((15, patch, patch, patch)).astype(np.float32)
    b = rng.standard_normal((15, patch, patch, patch)).astype(np.float32)
    return trainer.PatchPair(input=a, target=b, origin=(0, 0, 0))


def test_rotation_range_zero_is_identity():
    rng = np.random.default_rng(6)
    pair = _random_pair(rng)
    out = trainer.augment_rotation(pair, rng, 0.0)
    assert out is pair


def test_rotation_preserves_degree_norms():
    rng = np.random.default_rng(7)
    pair = _random_pair(rng)
    out = trainer.augment_rotation(pair, rng, 25.0)
    for l in (0, 2, 4):
        sl = sh.degree_slice(l)
        before = np.linalg.norm(pair.input[sl], axis=0)
        after = np.linalg.norm(out.input[sl], axis=0)
        assert np.abs(before - after).max() < 1e-6 * max(1.0, before.max())


def test_rotation_preserves_input_target_acc():
    rng = np.random.default_rng(8)
    pair = _random_pair(rng, patch=6)
    out = trainer.augment_rotation(pair, rng, 25.0)
    before = sh.acc_map(np.moveaxis(pair.input, 0, -1), np.moveaxis(pair.target, 0, -1))
    after = sh.acc_map(np.moveaxis(out.input, 0, -1), np.moveaxis(out.target, 0, -1))
    assert np.abs(before - after).max() < 1e-5


def test_rotation_angles_within_range():
    rng = np.random.default_rng(9)
    for _ in range(50):
        rot = trainer.draw_rotation(rng, 25.0)
        for ang in (rot.alpha, rot.beta, rot.gamma):
            assert abs(ang) <= math.radians(25.0)


# ---------------------------------------------------------------------------
# schedule / config


def test_lr_schedule():
    cfg = trainer.TrainConfig()
    assert cfg.lr_at(0) == 3e-2
    assert cfg.lr_at(49) == 3e-2
    assert cfg.lr_at(50) == 1.5e-2
    assert cfg.lr_at(120) == pytest.approx(7.5e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        trainer.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        trainer.TrainConfig(rotation_range_deg=-1.0)


def test_config_defaults_match_protocol():
    cfg = trainer.TrainConfig()
    assert cfg.epochs == 400
    assert cfg.base_lr == 3e-2
    assert cfg.lr_halving_period == 50
    assert cfg.weight_decay == 1e-6
    assert cfg.patches_per_subject == 40
    assert cfg.patch_size == 32
    assert cfg.rotation_range_deg == 25.0


# ---------------------------------------------------------------------------
# training loop


def _tiny_cfg(**kw):
    base = dict(epochs=3, base_lr=1e-3, lr_halving_period=2, patches_per_subject=2,
                patch_size=16, rotation_range_deg=10.0, seed=5, val_cadence=2,
                val_patches=2)
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_train_deterministic(tmp_path, toy_scene):
    r1 = trainer.train(_tiny_cfg(), [toy_scene], [toy_scene], "highresnet_lite",
                       tmp_path / "a")
    r2 = trainer.train(_tiny_cfg(), [toy_scene], [toy_scene], "highresnet_lite",
                       tmp_path / "b")
    assert r1.history == r2.history
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()
    assert (tmp_path / "a/best.ckpt").read_bytes() == (tmp_path / "b/best.ckpt").read_bytes()


def test_train_best_val_not_worse_than_final(tmp_path, toy_scene):
    res = trainer.train(_tiny_cfg(epochs=4), [toy_scene], [toy_scene],
                        "highresnet_lite", tmp_path / "w")
    final_vals = [v for _, _, v, _ in res.history if not math.isnan(v)]
    assert res.best_val_loss <= final_vals[-1] + 1e-12


def test_train_history_csv_roundtrip(tmp_path, toy_scene):
    res = trainer.train(_tiny_cfg(), [toy_scene], [toy_scene], "highresnet_lite",
                        tmp_path / "h")
    back = trainer.read_history(tmp_path / "h" / "loss_history.csv")
    assert len(back) == len(res.history)
    for a, b in zip(back, res.history):
        assert a[0] == b[0]
        assert a[1] == pytest.approx(b[1], rel=1e-8)


def test_train_divergence_aborts(tmp_path, toy_scene):
    bad = trainer.TrainScene("bad", toy_scene.input,
                             np.full_like(toy_scene.target, np.nan), toy_scene.mask)
    with pytest.raises(trainer.TrainingDivergedError) as err:
        trainer.train(_tiny_cfg(), [bad], [bad], "highresnet_lite", tmp_path / "d")
    assert (tmp_path / "d" / "diverged.ckpt").exists()
    assert "diverged.ckpt" in str(err.value)


def test_train_resume_from_checkpoint(tmp_path, toy_scene):
    r1 = trainer.train(_tiny_cfg(), [toy_scene], [toy_scene], "highresnet_lite",
                       tmp_path / "s1")
    r2 = trainer.train(_tiny_cfg(epochs=2), [toy_scene], [toy_scene], "highresnet_lite",
                       tmp_path / "s2", init_from=r1.final_path)
    assert len(r2.history) == 2
    with pytest.raises(ValueError, match="architecture"):
        trainer.train(_tiny_cfg(epochs=1), [toy_scene], [toy_scene], "unet_lite",
                      tmp_path / "s3", init_from=r1.final_path)


def test_loss_zero_on_perfect_pairs():
    net = N.highresnet_lite()
    N.he_uniform_init(net, 1)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((15, 16, 16, 16)).astype(np.float32)
    y = net.forward(x, train=False)
    pairs = [trainer.PatchPair(input=x, target=y, origin=(0, 0, 0))]
    assert trainer._eval_loss(net, [pairs]) == 0.0


# ---------------------------------------------------------------------------
# inference


def _identity_net():
    net = N.Network(15, arch="identity")
    conv = N.Conv3d(15, 15, 1, 1)
    conv.params["weight"][...] = np.eye(15, dtype=np.float32).reshape(15, 15, 1, 1, 1)
    net.add("id", conv)
    return net


def test_infer_identity_network():
    net = _identity_net()
    rng = np.random.default_rng(11)
    vol = rng.standard_normal((48, 48, 48, 15)).astype(np.float32)
    mask = np.zeros((48, 48, 48), bool)
    mask[4:44, 4:44, 4:44] = True
    out = trainer.infer_volume(net, vol, mask)
    assert np.abs(out[mask] - vol[mask]).max() < 1e-6
    assert np.all(out[~mask] == 0.0)


def test_infer_stride_neutral_for_identity():
    net = _identity_net()
    rng = np.random.default_rng(12)
    vol = rng.standard_normal((48, 48, 48, 15)).astype(np.float32)
    mask = np.ones((48, 48, 48), bool)
    a = trainer.infer_volume(net, vol, mask, stride=16)
    b = trainer.infer_volume(net, vol, mask, stride=8)
    assert np.array_equal(a, b)


def test_infer_pads_small_volume():
    net = _identity_net()
    rng = np.random.default_rng(13)
    vol = rng.standard_normal((20, 20, 20, 15)).astype(np.float32)
    mask = np.ones((20, 20, 20), bool)
    out = trainer.infer_volume(net, vol, mask)
    assert out.shape == vol.shape
    assert np.abs(out - vol).max() < 1e-6
