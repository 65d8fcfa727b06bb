import math

import numpy as np
import pytest

from fodkit import csd, phantom, sh

from conftest import dense_sphere, random_unit


def test_single_fiber_zonal_along_z():
    f = phantom.single_fiber_fod(np.array([0.0, 0.0, 1.0]), 4)
    ls, ms = sh.degree_order_table(4)
    nonzero = np.abs(f.values) > 1e-13
    assert np.all(ms[nonzero] == 0)


def test_single_fiber_antipodal():
    rng = np.random.default_rng(0)
    for u in random_unit(rng, 5):
        a = phantom.single_fiber_fod(u, 4)
        b = phantom.single_fiber_fod(-u, 4)
        assert np.allclose(a.values, b.values, atol=1e-12)


def test_single_fiber_peak_direction():
    grid = dense_sphere(10000)
    rng = np.random.default_rng(1)
    for l_max in (4, 8):
        basis = sh.sh_basis(grid, l_max)
        for u in random_unit(rng, 4):
            f = phantom.single_fiber_fod(u, l_max)
            amp = basis @ f.values
            best = grid[np.argmax(amp)]
            angle = math.degrees(math.acos(min(1.0, abs(float(best @ u)))))
            assert angle < 3.0
            assert amp.min() >= -1e-9


def test_single_fiber_unit_integral():
    f = phantom.single_fiber_fod(np.array([0.0, 1.0, 0.0]), 4)
    assert abs(f.values[0] * math.sqrt(4 * math.pi) - 1.0) < 1e-12


def test_apodized_weights_table():
    assert np.allclose(phantom.apodized_weights(4), [1.0, 0.5993, 0.1902])
    with pytest.raises(ValueError):
        phantom.apodized_weights(6)


# ---------------------------------------------------------------------------
# generation


@pytest.fixture(scope="module")
def small_noiseless():
    spec = phantom.make_scene("crossing-X", "B", seed=5, snr=math.inf, dims=(32, 32, 32))
    return spec, phantom.generate(spec)


def test_generate_deterministic():
    spec = phantom.make_scene("crossing-X", "A", seed=7, snr=25.0, dims=(20, 20, 20))
    dwi1, truth1 = phantom.generate(spec)
    dwi2, truth2 = phantom.generate(spec)
    assert np.array_equal(dwi1.data, dwi2.data)
    assert np.array_equal(truth1.coeffs.data, truth2.coeffs.data)
    assert np.array_equal(truth1.labels, truth2.labels)


def test_generate_noise_sigma():
    dims = (24, 24, 24)
    quiet = phantom.make_scene("crossing-X", "A", seed=9, snr=math.inf, dims=dims)
    noisy = phantom.make_scene("crossing-X", "A", seed=9, snr=30.0, dims=dims)
    dwi_q, truth = phantom.generate(quiet)
    dwi_n, _ = phantom.generate(noisy)
    b0 = dwi_q.scheme.b0_indices
    clean = dwi_q.data[truth.brain_mask][:, b0].astype(np.float64)
    mean_b0 = float(clean.mean())
    # b0 signals are far from the clipping floor, so the sample sigma is clean
    diff = dwi_n.data[truth.brain_mask][:, b0].astype(np.float64) - clean
    sigma = float(diff.std())
    assert abs(sigma - mean_b0 / 30.0) <= 0.05 * mean_b0 / 30.0


def test_generate_truth_nonnegative(small_noiseless, sphere_grid):
    _, (_, truth) = small_noiseless
    basis = sh.sh_basis(sphere_grid, 4)
    wm = truth.coeffs.wm[truth.wm_mask]
    amps = wm @ basis.T
    assert float(amps.min()) >= -1e-9


def test_generate_crossing_has_two_peaks(small_noiseless):
    spec, (_, truth) = small_noiseless
    grid = dense_sphere(4000)
    half = grid[grid[:, 2] >= 0]
    basis = sh.sh_basis(half, 4)
    crossing = truth.wm_mask & (truth.labels == 1)
    assert crossing.any()
    # the voxel nearest the grid center carries both bundles at full weight
    center = (np.asarray(spec.dims) - 1) / 2.0
    coords = np.argwhere(crossing)
    idx = tuple(coords[np.argmin(np.linalg.norm(coords - center, axis=1))])
    amps = basis @ truth.coeffs.wm[idx]
    # peaks = cap directions that are amplitude maxima within a 30-degree
    # symmetrized neighborhood, deduplicated antipodally
    cos30 = math.cos(math.radians(30))
    cap = np.nonzero(amps >= 0.8 * amps.max())[0]
    reps = []
    for i in cap:
        near = cap[np.abs(half[cap] @ half[i]) > cos30]
        if amps[i] >= amps[near].max():
            reps.append(i)
    uniq = []
    for i in reps:
        if all(abs(float(half[i] @ half[j])) < cos30 for j in uniq):
            uniq.append(i)
    assert len(uniq) == 2


def test_generate_fraction_overflow_errors():
    spec = phantom.make_scene("crossing-X", "A", seed=0, snr=math.inf, dims=(20, 20, 20))
    fat = tuple(
        phantom.Bundle(b.kind, b.center, b.radius, 0.8, axis=b.axis,
                       arc_radius=b.arc_radius, arc_angles=b.arc_angles)
        for b in spec.bundles
    )
    from dataclasses import replace

    with pytest.raises(ValueError, match="voxel"):
        phantom.generate(replace(spec, bundles=fat))


def test_signals_match_forward_convolution(small_noiseless):
    spec, (dwi, truth) = small_noiseless
    conv = csd.build_convolution(spec.scheme, spec.response, 4)
    idx = tuple(np.argwhere(truth.wm_mask)[0])
    x = truth.coeffs.data[idx].astype(np.float64)
    raw = conv.matrix @ x
    want = np.empty_like(raw)
    want[conv.row_order] = raw
    assert np.allclose(dwi.data[idx], want, atol=1e-5)


def test_roundtrip_noiseless_recovery(small_noiseless):
    spec, (dwi, truth) = small_noiseless
    fit = csd.fit_mcsd(dwi, spec.response, l_max=4, mask=truth.brain_mask)
    acc = sh.acc_map(fit.wm[truth.wm_mask], truth.coeffs.wm[truth.wm_mask])
    assert float(acc.mean()) >= 0.99
    peak = float(np.abs(truth.coeffs.wm).max())
    assert sh.mae(fit.wm, truth.coeffs.wm, truth.wm_mask) <= 1e-3 * peak


# ---------------------------------------------------------------------------
# scenes and protocols


def test_standard_scene_roster():
    scenes = phantom.standard_scenes(dims=(20, 20, 20))
    assert len(scenes) == 6
    names = {s.name for s in scenes}
    assert names == set(phantom.SCENE_NAMES)
    protocols = {s.protocol for s in scenes}
    assert protocols == {"A", "B"}


def test_protocol_arithmetic():
    b = phantom.protocol_scheme("B")
    assert len(b) == 276
    assert int((b.bvals <= 50).sum()) == 6
    a = phantom.protocol_scheme("A")
    assert len(a) == 102
    from fodkit.gradients import extract_single_shell

    sub = extract_single_shell(a, 2500.0)
    assert int((sub.bvals > 50).sum()) == 64


def test_scene_wm_mask_size_and_labels():
    for name in phantom.SCENE_NAMES:
        spec = phantom.make_scene(name, "A", seed=1, snr=math.inf, dims=(48, 48, 48))
        _, truth = phantom.generate(spec)
        n_vox = int(np.prod(spec.dims))
        assert int(truth.wm_mask.sum()) > 0.05 * n_vox, name
        labels = set(np.unique(truth.labels[truth.wm_mask]).tolist())
        assert labels == {1, 2, 3, 4, 5}, name
        assert int((truth.labels != 0).sum()) == int(truth.wm_mask.sum())
        assert np.all(truth.wm_mask <= truth.brain_mask)


def test_scene_config_roundtrip(tmp_path):
    spec = phantom.make_scene("kissing-C", "A", seed=3, snr=20.0, dims=(24, 24, 24))
    path = tmp_path / "scene.cfg"
    phantom.spec_to_config(spec, path)
    back = phantom.spec_from_config(path)
    assert back.name == spec.name
    assert back.dims == spec.dims
    assert back.snr == spec.snr
    assert len(back.bundles) == len(spec.bundles)
    d1, _ = phantom.generate(spec)
    d2, _ = phantom.generate(back)
    assert np.allclose(d1.data, d2.data, atol=1e-5)


def test_scene_variants_differ():
    a = phantom.scene_variant("crossing-X", "B", seed=1, dims=(16, 16, 16))
    b = phantom.scene_variant("crossing-X", "B", seed=2, dims=(16, 16, 16))
    assert not np.allclose(a.bundles[0].axis, b.bundles[0].axis)
