"""Simulator tests: closed-form bin geometry, Monte-Carlo noise
expectations, ghost arithmetic, dataset reproducibility."""

import math
import os

import numpy as np
import pytest

from sonarfuse.errors import DataIOError
from sonarfuse.imagecore import Image, PolarFan, polar_to_cartesian
from sonarfuse.sonarsim import (
    DegradationSpec,
    FanGeometry,
    SceneSpec,
    Trajectory,
    circular,
    degrade,
    gen_sequence,
    linear,
    preset,
    read_dataset,
    read_poses,
    render_clean,
    target_visible,
    write_dataset,
)

GEOM_SMALL = FanGeometry(range_bins=21, beam_count=9, fov_deg=60.0,
                         max_range=10.0)


def test_zero_reflectivity_gives_pure_background():
    scene = SceneSpec("capsule", 1.0, 0.0, (0.0, 5.0), 0.25)
    fan = render_clean(scene, 0.3, GEOM_SMALL)
    assert np.array_equal(fan.samples, np.full((21, 9), 0.25))
    assert not target_visible(scene, 0.3, GEOM_SMALL)


def test_point_target_lands_in_closed_form_bin():
    # capsule small enough to cover exactly one sample of the 0.5 m grid
    r_target = 4.0
    scene = SceneSpec("capsule", 0.4, 0.8, (0.0, r_target), 0.1)
    fan = render_clean(scene, 0.0, GEOM_SMALL)
    dr = GEOM_SMALL.max_range / (GEOM_SMALL.range_bins - 1)
    bin_r = math.floor(r_target / dr)
    bin_b = (GEOM_SMALL.beam_count - 1) // 2  # bearing 0 at the center beam
    assert bin_r == 8
    assert fan.samples[bin_r, bin_b] == 0.8
    # shadow behind the echo on that beam, background everywhere else
    assert np.all(fan.samples[bin_r + 1 :, bin_b] == 0.0)
    mask = np.full((21, 9), False)
    mask[bin_r:, bin_b] = True
    assert np.all(fan.samples[~mask] == 0.1)


def test_full_turn_reproduces_fan_bitwise():
    scene, _ = preset("tire")
    a = render_clean(scene, 0.0, GEOM_SMALL)
    b = render_clean(scene, 2.0 * math.pi, GEOM_SMALL)
    assert np.array_equal(a.samples, b.samples)


def test_ring_profile_echo_hole_echo_shadow():
    geom = FanGeometry(range_bins=101, beam_count=9, fov_deg=60.0,
                       max_range=10.0)
    scene = SceneSpec("ring", 2.5, 0.8, (0.0, 5.0), 0.2)
    fan = render_clean(scene, 0.0, geom)
    beam = fan.samples[:, 4]  # bearing 0
    # outer radius 1.25, inner 0.6875, centered at range 5.0, 0.1 m bins
    assert np.all(beam[:38] == 0.2)  # in front of the ring
    assert np.all(beam[39:44] == 0.8)  # near arc
    assert np.all(beam[45:56] == 0.2)  # the hole is visible, not shadowed
    assert np.all(beam[57:63] == 0.8)  # far arc
    assert np.all(beam[63:] == 0.0)  # acoustic shadow


def test_presets_visible_and_valid():
    for name in ("tire", "torpedo", "frustum"):
        scene, degr = preset(name)
        assert target_visible(scene, 0.0, FanGeometry())
        assert degr.speckle_shape > 0
    with pytest.raises(ValueError):
        preset("submarine")


def test_speckle_expectation_monte_carlo():
    fan = PolarFan.from_samples(np.full((8, 10), 0.5))
    spec = DegradationSpec(2.0, 0, 0.0, 0, 0.6)
    total = 0.0
    n = 10000
    for i in range(n):
        total += degrade(fan, spec, i).samples.mean()
    assert total / n == pytest.approx(0.5 * 0.6, rel=0.01)


def test_high_shape_concentrates_at_contrast_times_fan():
    rng = np.random.default_rng(3)
    fan = PolarFan.from_samples(rng.uniform(0.2, 1.0, (12, 7)))
    spec = DegradationSpec(1e6, 0, 0.0, 0, 0.7)
    out = degrade(fan, spec, 0)
    rel = np.abs(out.samples / (0.7 * fan.samples) - 1.0)
    assert rel.max() < 1e-2


def test_ghost_arithmetic_on_impulse():
    samples = np.zeros((20, 5))
    samples[3, 2] = 1.0
    fan = PolarFan.from_samples(samples)
    spec = DegradationSpec(math.inf, 2, 0.5, 5, 0.8)
    out = degrade(fan, spec, 0).samples
    want = np.zeros((20, 5))
    want[3, 2] = 0.8
    want[8, 2] = 0.8 * 0.5
    want[13, 2] = 0.8 * 0.25
    assert np.array_equal(out, want)


def test_ghost_shift_past_max_range_drops():
    samples = np.zeros((6, 3))
    samples[4, 1] = 1.0
    fan = PolarFan.from_samples(samples)
    spec = DegradationSpec(math.inf, 3, 0.5, 4, 1.0)
    out = degrade(fan, spec, 0).samples
    assert out[4, 1] == 1.0
    assert np.count_nonzero(out) == 1  # ghosts would land past the last bin


def test_same_seed_reproduces_noise():
    fan = PolarFan.from_samples(np.full((6, 6), 0.4))
    spec = DegradationSpec(2.0, 1, 0.3, 2, 0.6)
    a = degrade(fan, spec, 42).samples
    b = degrade(fan, spec, 42).samples
    c = degrade(fan, spec, 43).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_degradation_preserves_nonnegativity():
    rng = np.random.default_rng(9)
    for seed in range(5):
        fan = PolarFan.from_samples(rng.uniform(0.0, 1.0, (10, 8)))
        spec = DegradationSpec(0.7, 2, 0.5, 3, 0.9)
        assert np.all(degrade(fan, spec, seed).samples >= 0.0)


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec(speckle_shape=0.0)
    with pytest.raises(ValueError):
        DegradationSpec(multipath_gain=1.5)
    with pytest.raises(ValueError):
        DegradationSpec(contrast_gain=0.0)
    with pytest.raises(ValueError):
        SceneSpec(target_kind="cube")
    with pytest.raises(ValueError):
        Trajectory("spiral", 1.0)


def test_circular_poses_exact():
    scene, _ = preset("tire")
    seq = gen_sequence(scene, DegradationSpec.none(), K=16,
                       trajectory=circular(1.0), seed=0, geom=GEOM_SMALL,
                       out_size=32)
    want = np.array([math.radians(i * 1.0) for i in range(16)])
    assert np.array_equal(seq.poses, want)


def test_zero_noise_frames_equal_clean_renders():
    scene, _ = preset("frustum")
    seq = gen_sequence(scene, DegradationSpec.none(), K=3,
                       trajectory=circular(5.0), seed=7, geom=GEOM_SMALL,
                       out_size=32)
    for i in range(3):
        clean = render_clean(scene, math.radians(i * 5.0), GEOM_SMALL)
        img = polar_to_cartesian(clean, 32).pixels
        want = np.rint(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0
        assert np.array_equal(seq.frames[i].pixels, want)


def test_linear_trajectory_translates_target():
    scene = SceneSpec("capsule", 2.0, 0.9, (-1.0, 5.0), 0.1)
    seq = gen_sequence(scene, DegradationSpec.none(), K=3,
                       trajectory=linear(1.0), seed=0, geom=GEOM_SMALL,
                       out_size=32)
    assert np.all(seq.poses == 0.0)
    assert not np.array_equal(seq.frames[0].pixels, seq.frames[2].pixels)


def test_gen_sequence_rejects_zero_frames():
    scene, degr = preset("tire")
    with pytest.raises(ValueError):
        gen_sequence(scene, degr, K=0)


def test_dataset_roundtrip_bit_exact(tmp_path):
    scene, degr = preset("tire")
    out = tmp_path / "ds"
    seq = write_dataset(out, scene, degr, K=3, trajectory=circular(2.0),
                        seed=5, geom=GEOM_SMALL, out_size=32)
    loaded, meta = read_dataset(out)
    assert len(loaded) == 3
    for i in range(3):
        assert np.array_equal(loaded.frames[i].pixels, seq.frames[i].pixels)
    assert np.array_equal(loaded.poses, seq.poses)
    assert meta["target_kind"] == "ring"
    assert meta["frames"] == "3"
    assert meta["empty_frames"] == "none"


def test_dataset_regeneration_byte_identical(tmp_path):
    scene, degr = preset("torpedo")
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        write_dataset(d, scene, degr, K=2, trajectory=circular(3.0), seed=9,
                      geom=GEOM_SMALL, out_size=32)
    names = sorted(os.listdir(d1))
    assert names == sorted(os.listdir(d2))
    for name in names:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_out_of_fan_target_flagged_empty(tmp_path):
    scene = SceneSpec("capsule", 1.0, 0.9, (0.0, 50.0), 0.2)
    out = tmp_path / "ds"
    seq = write_dataset(out, scene, DegradationSpec.none(), K=2,
                        trajectory=circular(1.0), seed=0, geom=GEOM_SMALL,
                        out_size=32)
    _, meta = read_dataset(out)
    assert meta["empty_frames"] == "0,1"
    # fan is background-only
    assert seq.frames[0].pixels.max() <= 0.2 + 1e-12


def test_read_poses_missing_file_names_it(tmp_path):
    missing = tmp_path / "poses.csv"
    with pytest.raises(DataIOError) as err:
        read_poses(missing)
    assert "poses.csv" in str(err.value)


def test_read_poses_rejects_bad_header(tmp_path):
    path = tmp_path / "poses.csv"
    path.write_text("idx,angle\n0,0.0\n")
    with pytest.raises(DataIOError):
        read_poses(path)


def test_read_dataset_missing_manifest(tmp_path):
    with pytest.raises(DataIOError):
        read_dataset(tmp_path)
