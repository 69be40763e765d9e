"""Synthetic forward-looking sonar sequences with controlled degradation.

Stands in for real acquisitions: 2D target silhouettes (ring, capsule,
trapezoid) are ray-sampled into a polar fan with an acoustic shadow cast
behind the material, then degraded by multipath ghosts (range-shifted,
gain-decayed copies), a global contrast gain, and unit-mean gamma
speckle. The speckle field can be given a correlation length (in fan
bins) so the noise forms resolution-cell blobs instead of per-pixel
salt; smoothing is renormalized to keep the field's mean and variance.
Everything is deterministic given (scene, degradation, trajectory,
seed); per-frame noise uses the seed pair [seed, frame].

Geometry convention matches polar_to_cartesian: fan samples sit on
endpoint grids, range bin i at i * max_range / (range_bins - 1), bearing
bin j spanning [-fov/2, +fov/2] linearly, bearing 0 straight ahead
(+y), positive bearings to +x. Pose angles rotate the target about its
own center; the angle is reduced mod 2*pi first so a full turn
reproduces the initial fan bit for bit.

Frames produced by gen_sequence are clipped to [0, 1] and snapped to the
16-bit grid, so a dataset written to PNG reloads bit-exactly.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DataIOError
from .fusenet import FrameSequence
from .imagecore import (
    Image,
    PolarFan,
    atomic_write_bytes,
    polar_to_cartesian,
    read_image,
    write_image,
)

PRESET_NAMES = ("tire", "torpedo", "frustum")

TARGET_KINDS = ("ring", "capsule", "trapezoid")


@dataclass(frozen=True)
class FanGeometry:
    range_bins: int = 160
    beam_count: int = 96
    fov_deg: float = 60.0
    max_range: float = 10.0

    def __post_init__(self):
        if self.range_bins < 2 or self.beam_count < 2:
            raise ValueError("fan needs at least 2 range bins and 2 beams")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    def grids(self):
        """(range values (nr, 1), bearing radians (1, nb)) sample grids."""
        r = np.linspace(0.0, self.max_range, self.range_bins)[:, None]
        half = math.radians(self.fov_deg) / 2.0
        b = np.linspace(-half, half, self.beam_count)[None, :]
        return r, b


@dataclass(frozen=True)
class SceneSpec:
    target_kind: str = "ring"
    target_size: float = 2.0  # meters, outer extent
    reflectivity: float = 0.9
    position: tuple = (0.0, 5.5)  # meters in tank frame, sonar at origin
    background_level: float = 0.15

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target_kind {self.target_kind!r}")
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if not (0.0 <= self.reflectivity <= 1.0):
            raise ValueError("reflectivity must be in [0, 1]")
        if not (0.0 <= self.background_level <= 1.0):
            raise ValueError("background_level must be in [0, 1]")
        object.__setattr__(self, "position",
                           (float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class DegradationSpec:
    speckle_shape: float = 2.0  # gamma shape, unit mean; lower = harsher
    multipath_count: int = 2
    multipath_gain: float = 0.3
    multipath_delay: int = 6  # range bins per ghost order
    contrast_gain: float = 0.6
    speckle_corr: float = 0.0  # correlation length in fan bins; 0 = i.i.d.

    def __post_init__(self):
        if not (self.speckle_shape > 0):
            raise ValueError("speckle_shape must be positive")
        if self.speckle_corr < 0:
            raise ValueError("speckle_corr must be >= 0")
        if self.multipath_count < 0:
            raise ValueError("multipath_count must be >= 0")
        if not (0.0 <= self.multipath_gain <= 1.0):
            raise ValueError("multipath_gain must be in [0, 1]")
        if self.multipath_delay < 0:
            raise ValueError("multipath_delay must be >= 0")
        if not (0.0 < self.contrast_gain <= 1.0):
            raise ValueError("contrast_gain must be in (0, 1]")

    @classmethod
    def none(cls):
        """Pass-through: no speckle, no ghosts, unit contrast."""
        return cls(speckle_shape=math.inf, multipath_count=0,
                   multipath_gain=0.0, multipath_delay=0, contrast_gain=1.0)


@dataclass(frozen=True)
class Trajectory:
    kind: str = "circular"
    step: float = 1.0  # degrees per frame (circular) or meters (linear)
    start: float = 0.0  # initial heading (deg) or along-track offset (m)

    def __post_init__(self):
        if self.kind not in ("circular", "linear"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")


def circular(step_deg: float = 1.0, start_deg: float = 0.0) -> Trajectory:
    return Trajectory("circular", step_deg, start_deg)


def linear(step_m: float = 0.1, start_m: float = 0.0) -> Trajectory:
    return Trajectory("linear", step_m, start_m)


# ---------------------------------------------------------------------------
# clean rendering


def _silhouette(scene: SceneSpec, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Membership mask of target-frame points (px, py)."""
    size = scene.target_size
    if scene.target_kind == "ring":
        outer = size / 2.0
        inner = 0.55 * outer
        rr = np.hypot(px, py)
        return (rr >= inner) & (rr <= outer)
    if scene.target_kind == "capsule":
        width = 0.35 * size
        half_seg = (size - width) / 2.0
        qx = np.clip(px, -half_seg, half_seg)
        return np.hypot(px - qx, py) <= width / 2.0
    # trapezoid: wide base at local -y, narrow top at +y
    height = 0.8 * size
    base_half = size / 2.0
    top_half = 0.25 * size
    frac = (py + height / 2.0) / height
    half_w = base_half + (top_half - base_half) * frac
    return (np.abs(py) <= height / 2.0) & (np.abs(px) <= half_w)


def _target_mask(scene: SceneSpec, pose_angle: float,
                 geom: FanGeometry) -> np.ndarray:
    r, b = geom.grids()
    x = r * np.sin(b)
    y = r * np.cos(b)
    # reduce full turns exactly so pose 2*pi reproduces pose 0 bit for bit
    phi = math.fmod(pose_angle, 2.0 * math.pi)
    cx, cy = scene.position
    dx, dy = x - cx, y - cy
    px = math.cos(phi) * dx + math.sin(phi) * dy
    py = -math.sin(phi) * dx + math.cos(phi) * dy
    return _silhouette(scene, px, py)


def target_visible(scene: SceneSpec, pose_angle: float,
                   geom: FanGeometry) -> bool:
    """True when the (echoing) target intersects at least one fan bin."""
    if scene.reflectivity == 0.0:
        return False
    return bool(_target_mask(scene, pose_angle, geom).any())


def render_clean(scene: SceneSpec, pose_angle: float,
                 geom: FanGeometry) -> PolarFan:
    """Noise-free fan: background, target echo, shadow zeroed behind it.

    A zero-reflectivity target returns no echo and casts no shadow, so
    the fan is background everywhere.
    """
    nr, nb = geom.range_bins, geom.beam_count
    vals = np.full((nr, nb), scene.background_level)
    if scene.reflectivity > 0.0:
        mask = _target_mask(scene, pose_angle, geom)
        vals = np.where(mask, scene.reflectivity, vals)
        hit = mask.any(axis=0)
        last = np.where(hit, nr - 1 - np.argmax(mask[::-1, :], axis=0), -1)
        rows = np.arange(nr)[:, None]
        vals = np.where(hit[None, :] & (rows > last[None, :]), 0.0, vals)
    return PolarFan(nr, nb, geom.fov_deg, geom.max_range, vals)


# ---------------------------------------------------------------------------
# degradation


@functools.lru_cache(maxsize=None)
def _corr_gain(sigma: float) -> float:
    # gaussian smoothing shrinks white-noise variance by sum(w^2); the
    # inverse square root restores the field's original variance
    n = 2 * int(math.ceil(4.0 * sigma)) + 1
    delta = np.zeros((n, n))
    delta[n // 2, n // 2] = 1.0
    w = ndimage.gaussian_filter(delta, sigma)
    return float(1.0 / math.sqrt((w * w).sum()))


def degrade(fan: PolarFan, spec: DegradationSpec, seed) -> PolarFan:
    """contrast_gain * (fan + ghosts), then unit-mean gamma speckle.

    Ghost g is the clean fan shifted g*delay range bins outward and
    scaled by gain^g. speckle_shape=inf skips the multiplicative noise.
    speckle_corr > 0 low-passes the noise field over that many bins and
    rescales the fluctuations back to the raw gamma variance, producing
    blob-like speckle without changing its first two moments (negative
    excursions are clipped, so the harshest settings shift the mean a
    little).
    """
    clean = fan.samples
    nr = fan.range_bins
    acc = clean.copy()
    for g in range(1, spec.multipath_count + 1):
        shift = g * spec.multipath_delay
        if shift >= nr:
            break
        ghost = np.zeros_like(clean)
        ghost[shift:, :] = clean[: nr - shift, :]
        acc += (spec.multipath_gain ** g) * ghost
    out = spec.contrast_gain * acc
    if not math.isinf(spec.speckle_shape):
        rng = np.random.default_rng(seed)
        k = spec.speckle_shape
        noise = rng.gamma(k, 1.0 / k, size=out.shape)
        if spec.speckle_corr > 0.0:
            smooth = ndimage.gaussian_filter(noise, spec.speckle_corr,
                                             mode="reflect")
            noise = 1.0 + _corr_gain(spec.speckle_corr) * (smooth - 1.0)
            noise = np.clip(noise, 0.0, None)
        out = out * noise
    return PolarFan(nr, fan.beam_count, fan.fov_deg, fan.max_range, out)


# ---------------------------------------------------------------------------
# sequences and datasets


def _snap16(arr: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap to the 16-bit grid (matches PNG round trip)."""
    return np.rint(np.clip(arr, 0.0, 1.0) * 65535.0) / 65535.0


def gen_sequence(scene: SceneSpec, degradation: DegradationSpec, K: int = 16,
                 trajectory: Trajectory = Trajectory(), seed: int = 0,
                 geom: FanGeometry = FanGeometry(),
                 out_size: int = 128) -> FrameSequence:
    """K degraded Cartesian frames at successive poses.

    Circular trajectories rotate the target by i*step degrees and record
    that angle; linear ones translate it i*step meters cross-range and
    record angle 0 (frame order then rests on content, which is fine
    because fusion is order-canonical).
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    frames = []
    poses = []
    for i in range(K):
        if trajectory.kind == "circular":
            pose = math.radians(trajectory.start + i * trajectory.step)
            sc = scene
        else:
            pose = 0.0
            sc = replace(scene, position=(scene.position[0] + trajectory.start
                                          + i * trajectory.step,
                                          scene.position[1]))
        fan = degrade(render_clean(sc, pose, geom), degradation, [seed, i])
        img = polar_to_cartesian(fan, out_size)
        frames.append(Image(_snap16(img.pixels)))
        poses.append(pose)
    return FrameSequence(tuple(frames), np.array(poses))


def preset(name: str):
    """(SceneSpec, DegradationSpec) pair for one of the three targets."""
    if name == "tire":
        return (
            SceneSpec("ring", 2.4, 0.9, (0.0, 5.5), 0.15),
            DegradationSpec(2.0, 2, 0.3, 6, 0.6, speckle_corr=7.0),
        )
    if name == "torpedo":
        return (
            SceneSpec("capsule", 3.2, 0.95, (0.3, 6.0), 0.12),
            DegradationSpec(3.0, 2, 0.25, 8, 0.7, speckle_corr=4.0),
        )
    if name == "frustum":
        return (
            SceneSpec("trapezoid", 2.4, 0.85, (-0.3, 5.2), 0.18),
            DegradationSpec(2.5, 1, 0.35, 5, 0.65, speckle_corr=6.0),
        )
    raise ValueError(f"unknown preset {name!r}: choose from {PRESET_NAMES}")


_MANIFEST_KEYS = (
    "target_kind", "target_size", "reflectivity", "position_x", "position_y",
    "background_level", "speckle_shape", "speckle_corr", "multipath_count",
    "multipath_gain", "multipath_delay", "contrast_gain", "trajectory",
    "step", "start",
    "seed", "frames", "resolution", "fan_range_bins", "fan_beam_count",
    "fan_fov_deg", "fan_max_range", "empty_frames",
)


def _frame_name(i: int) -> str:
    return f"frame_{i:03d}.png"


def write_dataset(dir_path, scene: SceneSpec, degradation: DegradationSpec,
                  K: int = 16, trajectory: Trajectory = Trajectory(),
                  seed: int = 0, geom: FanGeometry = FanGeometry(),
                  out_size: int = 128) -> FrameSequence:
    """Generate and persist a sequence: manifest + PNG frames + poses.csv."""
    import os

    seq = gen_sequence(scene, degradation, K, trajectory, seed, geom, out_size)
    os.makedirs(dir_path, exist_ok=True)
    empty = [
        str(i) for i in range(K)
        if not target_visible(
            scene if trajectory.kind == "circular"
            else replace(scene, position=(scene.position[0] + trajectory.start
                                          + i * trajectory.step,
                                          scene.position[1])),
            float(seq.poses[i]), geom)
    ]
    values = {
        "target_kind": scene.target_kind,
        "target_size": repr(scene.target_size),
        "reflectivity": repr(scene.reflectivity),
        "position_x": repr(scene.position[0]),
        "position_y": repr(scene.position[1]),
        "background_level": repr(scene.background_level),
        "speckle_shape": repr(degradation.speckle_shape),
        "speckle_corr": repr(degradation.speckle_corr),
        "multipath_count": str(degradation.multipath_count),
        "multipath_gain": repr(degradation.multipath_gain),
        "multipath_delay": str(degradation.multipath_delay),
        "contrast_gain": repr(degradation.contrast_gain),
        "trajectory": trajectory.kind,
        "step": repr(trajectory.step),
        "start": repr(trajectory.start),
        "seed": str(seed),
        "frames": str(K),
        "resolution": str(out_size),
        "fan_range_bins": str(geom.range_bins),
        "fan_beam_count": str(geom.beam_count),
        "fan_fov_deg": repr(geom.fov_deg),
        "fan_max_range": repr(geom.max_range),
        "empty_frames": ",".join(empty) if empty else "none",
    }
    manifest = "".join(f"{k} = {values[k]}\n" for k in _MANIFEST_KEYS)
    atomic_write_bytes(os.path.join(dir_path, "manifest"),
                       manifest.encode("ascii"))
    lines = ["index,angle_rad"]
    lines += [f"{i},{float(seq.poses[i])!r}" for i in range(K)]
    atomic_write_bytes(os.path.join(dir_path, "poses.csv"),
                       ("\n".join(lines) + "\n").encode("ascii"))
    for i, frame in enumerate(seq.frames):
        write_image(frame, os.path.join(dir_path, _frame_name(i)))
    return seq


def read_poses(path) -> np.ndarray:
    """Parse a poses.csv; DataIOError names the file when it is missing."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataIOError(f"cannot read pose file {str(path)!r}: {e}") from e
    if not rows or rows[0] != ["index", "angle_rad"]:
        raise DataIOError(f"pose file {str(path)!r} must start with "
                          "'index,angle_rad'")
    poses = []
    for n, row in enumerate(rows[1:]):
        if len(row) != 2 or int(row[0]) != n:
            raise DataIOError(f"pose file {str(path)!r}: bad row {n + 1}")
        poses.append(float(row[1]))
    return np.array(poses)


def read_dataset(dir_path):
    """Load a dataset directory -> (FrameSequence, manifest dict)."""
    import os

    manifest_path = os.path.join(dir_path, "manifest")
    try:
        with open(manifest_path, encoding="ascii") as f:
            text = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read manifest {manifest_path!r}: {e}") from e
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataIOError(f"malformed manifest line {line!r}")
        meta[key] = value
    try:
        count = int(meta["frames"])
    except (KeyError, ValueError) as e:
        raise DataIOError(f"manifest {manifest_path!r} lacks a valid "
                          f"'frames' entry") from e
    poses = read_poses(os.path.join(dir_path, "poses.csv"))
    if poses.shape != (count,):
        raise DataIOError(f"pose count {poses.shape[0]} != frames {count}")
    frames = tuple(
        read_image(os.path.join(dir_path, _frame_name(i)))
        for i in range(count)
    )
    return FrameSequence(frames, poses), meta
