"""Multi-frame fusion network: encoder, pairwise fusion tree, decoder.

Functional design: a FusionModel is a dict of named float arrays, and the
forward pass is pure. The architecture (two 3x3 conv layers per stage,
C_lat=32 latent channels, leaky rectifier slope 0.1, bilinear 2x decoder
upsample) is a compact stand-in chosen to train on CPU at desk scale.

The pairwise merge runs on the channel concatenation [a+b, |a-b|], both
halves symmetric in (a, b) down to the bit (IEEE addition commutes and
b-a is the exact negation of a-b), so fuse_pair(a, b) == fuse_pair(b, a)
exactly. A pairwise tree alone is still order-dependent across merges,
so `forward` first puts frames into a canonical order keyed by (pose
angle mod 2*pi, frame content digest); the enhanced output is therefore
a function of the (frame, pose) multiset, and reordering input frames
never changes it.

Resolution chain: the feature bridge halves the frame, the decoder
doubles, so output dims equal input dims; the `sr2x` flag inserts a
second upsampling stage for a 2x super-resolved output.

Checkpoints are self-contained: bank config, offsets, normalization
affine, and all conv parameters, stored as named float32 blocks. Loading
then saving reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import _torchops as to
from .errors import DataIOError
from .imagecore import Image, atomic_write_bytes
from .scatterbridge import (
    BankConfig,
    FeatureTensor,
    NormState,
    OffsetParams,
    bridge_torch,
    normalize_torch,
)

C_LAT_DEFAULT = 32
LEAKY_SLOPE = 0.1

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1

VARIANTS = ("wst", "flr", "flr+hog", "flr+canny", "flr+gre", "flr+haar")


@dataclass(frozen=True)
class FrameSequence:
    """K aligned frames plus per-frame trajectory angles (radians)."""

    frames: tuple
    poses: np.ndarray

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise ValueError("FrameSequence needs at least one frame")
        shape = frames[0].shape
        for fr in frames:
            if fr.shape != shape:
                raise ValueError("all frames must share dims")
        poses = np.array(self.poses, dtype=np.float64)
        if poses.shape != (len(frames),):
            raise ValueError(f"poses shape {poses.shape} != ({len(frames)},)")
        if not np.isfinite(poses).all():
            raise ValueError("poses must be finite")
        poses.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.frames)


def _param_specs(c_in: int, c_lat: int, sr2x: bool):
    specs = [
        ("enc1.w", (c_lat, c_in, 3, 3)),
        ("enc1.b", (c_lat,)),
        ("enc2.w", (c_lat, c_lat, 3, 3)),
        ("enc2.b", (c_lat,)),
        ("fuse1.w", (c_lat, 2 * c_lat, 3, 3)),
        ("fuse1.b", (c_lat,)),
        ("fuse2.w", (c_lat, c_lat, 3, 3)),
        ("fuse2.b", (c_lat,)),
        ("dec1.w", (c_lat, c_lat, 3, 3)),
        ("dec1.b", (c_lat,)),
    ]
    if sr2x:
        specs += [("decm.w", (c_lat, c_lat, 3, 3)), ("decm.b", (c_lat,))]
    specs += [("dec2.w", (1, c_lat, 3, 3)), ("dec2.b", (1,))]
    return specs


@dataclass
class FusionModel:
    """Named conv parameters for encoder E, fusion F, decoder D."""

    c_in: int
    c_lat: int
    sr2x: bool
    params: dict

    def check(self):
        want = _param_specs(self.c_in, self.c_lat, self.sr2x)
        names = [n for n, _ in want]
        if list(self.params.keys()) != names:
            raise ValueError("parameter names do not match the layer spec")
        for name, shape in want:
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape "
                                 f"{self.params[name].shape}, want {shape}")
        return self


def init_model(c_in: int, c_lat: int = C_LAT_DEFAULT, seed: int = 0,
               sr2x: bool = False) -> FusionModel:
    """Fan-in-scaled uniform init (bound sqrt(6/fan_in)), zero biases.

    Draws happen in fixed parameter order from a seeded generator, and
    weights are quantized to float32 values up front so the initial
    checkpoint is a lossless copy of the in-memory model.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_specs(c_in, c_lat, sr2x):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            draw = rng.uniform(-bound, bound, size=shape)
            params[name] = draw.astype(np.float32).astype(np.float64)
    return FusionModel(c_in, c_lat, sr2x, params).check()


def params_to_torch(model: FusionModel, requires_grad: bool = False) -> dict:
    out = {}
    for name, arr in model.params.items():
        t = torch.from_numpy(np.array(arr, dtype=np.float64))
        t.requires_grad_(requires_grad)
        out[name] = t
    return out


# ---------------------------------------------------------------------------
# torch core (shared with the trainer)


def _conv3(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.conv2d(to.pad_reflect(x, 1), w, b)


def encode_t(x: torch.Tensor, p: dict) -> torch.Tensor:
    """(B, C_in, H, W) -> (B, C_lat, H, W)."""
    h = F.leaky_relu(_conv3(x, p["enc1.w"], p["enc1.b"]), LEAKY_SLOPE)
    return F.leaky_relu(_conv3(h, p["enc2.w"], p["enc2.b"]), LEAKY_SLOPE)


def fuse_pair_t(a: torch.Tensor, b: torch.Tensor, p: dict) -> torch.Tensor:
    x = torch.cat([a + b, torch.abs(a - b)], dim=1)
    h = F.leaky_relu(_conv3(x, p["fuse1.w"], p["fuse1.b"]), LEAKY_SLOPE)
    return F.leaky_relu(_conv3(h, p["fuse2.w"], p["fuse2.b"]), LEAKY_SLOPE)


def fuse_tree_t(latents: list, p: dict) -> torch.Tensor:
    """Balanced pairwise reduction; an odd tail latent is carried upward."""
    level = list(latents)
    while len(level) > 1:
        nxt = [fuse_pair_t(level[i], level[i + 1], p)
               for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def decode_t(z: torch.Tensor, p: dict, sr2x: bool) -> torch.Tensor:
    """(B, C_lat, H, W) -> (B, 1, 2H, 2W), or 4H/4W with sr2x."""
    h = F.leaky_relu(_conv3(z, p["dec1.w"], p["dec1.b"]), LEAKY_SLOPE)
    h = F.interpolate(h, scale_factor=2.0, mode="bilinear", align_corners=False)
    if sr2x:
        h = F.leaky_relu(_conv3(h, p["decm.w"], p["decm.b"]), LEAKY_SLOPE)
        h = F.interpolate(h, scale_factor=2.0, mode="bilinear",
                          align_corners=False)
    return _conv3(h, p["dec2.w"], p["dec2.b"])


def fuse_from_feats_t(feats: list, p: dict, sr2x: bool) -> torch.Tensor:
    """Encode a list of (C, h, w) feature stacks, fuse, decode. -> (H, W)."""
    lat = encode_t(torch.stack(feats), p)
    z = fuse_tree_t([lat[i : i + 1] for i in range(lat.shape[0])], p)
    return decode_t(z, p, sr2x)[0, 0]


def forward_t(frames_t: list, cfg: BankConfig, dj_t, dth_t, gamma_t, beta_t,
              p: dict, sr2x: bool, eps: float = 1e-5,
              caches: list | None = None) -> torch.Tensor:
    """Bridge + normalize + encode + fuse + decode, all torch. -> (H, W)."""
    feats = []
    for i, f in enumerate(frames_t):
        cache = caches[i] if caches is not None else None
        t = bridge_torch(f, cfg, dj_t, dth_t, cache)
        feats.append(normalize_torch(t, gamma_t, beta_t, eps))
    return fuse_from_feats_t(feats, p, sr2x)


# ---------------------------------------------------------------------------
# numpy-facing ops


def _lat_to_t(a) -> torch.Tensor:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"latent must be (H, W, C), got {arr.shape}")
    return torch.from_numpy(np.array(arr)).permute(2, 0, 1)[None]


def _t_to_lat(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).numpy()


def encode(tensor: FeatureTensor, model: FusionModel) -> np.ndarray:
    """Encode an H x W x C_in feature tensor to an H x W x C_lat latent."""
    if tensor.channels != model.c_in:
        raise ValueError(
            f"tensor has {tensor.channels} channels, model expects {model.c_in}"
        )
    with torch.no_grad():
        t = encode_t(_lat_to_t(tensor.values), params_to_torch(model))
    return _t_to_lat(t)


def fuse_pair(a, b, model: FusionModel) -> np.ndarray:
    """Order-symmetric merge of two equal-shape latents."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"latent shapes differ: {a.shape} vs {b.shape}")
    with torch.no_grad():
        t = fuse_pair_t(_lat_to_t(a), _lat_to_t(b), params_to_torch(model))
    return _t_to_lat(t)


def fuse_tree(latents, model: FusionModel) -> np.ndarray:
    """Balanced pairwise reduction of K latents (K=1 returns the input)."""
    if len(latents) < 1:
        raise ValueError("fuse_tree needs at least one latent")
    level = [np.asarray(a, dtype=np.float64) for a in latents]
    while len(level) > 1:
        nxt = [fuse_pair(level[i], level[i + 1], model)
               for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def decode(z, model: FusionModel) -> Image:
    """Decode a fused latent to the single-channel output image."""
    with torch.no_grad():
        t = decode_t(_lat_to_t(z), params_to_torch(model), model.sr2x)
    return Image(t[0, 0].numpy())


def canonical_order(seq: FrameSequence) -> list:
    """Frame order keyed by (pose mod 2*pi, content digest).

    Makes every sequence operation a function of the (frame, pose)
    multiset: reordering the inputs cannot change downstream results.
    """
    two_pi = 2.0 * math.pi

    def key(i):
        pose = math.fmod(float(seq.poses[i]), two_pi)
        if pose < 0.0:
            pose += two_pi
        digest = hashlib.sha256(
            np.ascontiguousarray(seq.frames[i].pixels).tobytes()
        ).hexdigest()
        return (pose, digest)

    return sorted(range(len(seq)), key=key)


def forward(seq: FrameSequence, cfg: BankConfig, offsets: OffsetParams,
            model: FusionModel, norm: NormState | None = None) -> Image:
    """Enhance one frame sequence: Y = D(fuse_tree(E(bridge(I_i))))."""
    hh, ww = seq.frames[0].shape
    if hh % 2 or ww % 2:
        raise ValueError(f"frames must have even dims, got {hh}x{ww}")
    if model.c_in != cfg.n_channels:
        raise ValueError(
            f"model expects {model.c_in} channels, bridge yields {cfg.n_channels}"
        )
    if norm is None:
        norm = NormState.identity(cfg.n_channels)
    order = canonical_order(seq)
    with torch.no_grad():
        frames_t = [torch.from_numpy(seq.frames[i].pixels.copy()) for i in order]
        y = forward_t(
            frames_t, cfg,
            torch.from_numpy(offsets.delta_j.copy()),
            torch.from_numpy(offsets.delta_theta.copy()),
            torch.from_numpy(np.asarray(norm.gamma, dtype=np.float64)),
            torch.from_numpy(np.asarray(norm.beta, dtype=np.float64)),
            params_to_torch(model), model.sr2x, norm.eps,
        )
    return Image(y.numpy())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainedState:
    """Everything needed to run enhancement: a self-contained checkpoint."""

    bank: BankConfig
    offsets: OffsetParams
    norm: NormState
    model: FusionModel
    variant: str = "wst"
    init_seed: int = 0

    def check(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.model.check()
        n = self.bank.n_filters
        if len(self.offsets) != n:
            raise ValueError("offset length does not match bank config")
        if self.norm.gamma.shape != (self.model.c_in,) or \
                self.norm.beta.shape != (self.model.c_in,):
            raise ValueError("norm affine must have c_in entries")
        return self


def _f32(arr) -> np.ndarray:
    # diagnostic checkpoints may carry diverged values; saturating to inf
    # is intended there, so the overflow warning is silenced
    with np.errstate(over="ignore"):
        return np.ascontiguousarray(np.asarray(arr, dtype=np.float64),
                                    dtype="<f4")


def _pack_block(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("ascii")
    data = _f32(arr)
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim)
    head += b"".join(struct.pack("<I", d) for d in data.shape)
    return head + data.tobytes()


def checkpoint_bytes(state: TrainedState) -> bytes:
    state.check()
    meta = {
        "bank": {
            "J": state.bank.J,
            "K": state.bank.K,
            "kernel_truncation": state.bank.kernel_truncation,
            "base_scale": state.bank.base_scale,
            "xi": state.bank.xi,
        },
        "variant": state.variant,
        "c_in": state.model.c_in,
        "c_lat": state.model.c_lat,
        "sr2x": state.model.sr2x,
        "init_seed": state.init_seed,
        "norm_eps": state.norm.eps,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<I", len(blob)), blob]
    blocks = [
        ("offsets.delta_j", state.offsets.delta_j),
        ("offsets.delta_theta", state.offsets.delta_theta),
        ("norm.gamma", state.norm.gamma),
        ("norm.beta", state.norm.beta),
    ] + list(state.model.params.items())
    out.append(struct.pack("<I", len(blocks)))
    out.extend(_pack_block(n, a) for n, a in blocks)
    return b"".join(out)


def save_checkpoint(state: TrainedState, path):
    atomic_write_bytes(path, checkpoint_bytes(state))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataIOError(f"checkpoint {self.path!r} truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> TrainedState:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path!r}: {e}") from e
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataIOError(f"{path!r} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataIOError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        bank = BankConfig(**meta["bank"])
        variant = meta["variant"]
        c_in, c_lat, sr2x = meta["c_in"], meta["c_lat"], bool(meta["sr2x"])
        init_seed = meta["init_seed"]
        norm_eps = meta["norm_eps"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise DataIOError(f"malformed checkpoint metadata in {path!r}: {e}") from e

    blocks = {}
    n_blocks = r.u32()
    for _ in range(n_blocks):
        name = r.take(struct.unpack("<H", r.take(2))[0]).decode("ascii")
        ndim = struct.unpack("<B", r.take(1))[0]
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        blocks[name] = arr.astype(np.float64)
    if r.pos != len(data):
        raise DataIOError(f"checkpoint {path!r} has trailing bytes")

    try:
        offsets = OffsetParams(blocks.pop("offsets.delta_j"),
                               blocks.pop("offsets.delta_theta"))
        norm = NormState(blocks.pop("norm.gamma"), blocks.pop("norm.beta"),
                         eps=norm_eps)
        model = FusionModel(c_in, c_lat, sr2x, {
            name: blocks.pop(name) for name, _ in _param_specs(c_in, c_lat, sr2x)
        })
    except KeyError as e:
        raise DataIOError(f"checkpoint {path!r} missing block {e}") from e
    if blocks:
        raise DataIOError(f"checkpoint {path!r} has unexpected blocks "
                          f"{sorted(blocks)}")
    try:
        return TrainedState(bank, offsets, norm, model, variant,
                            init_seed).check()
    except ValueError as e:
        raise DataIOError(f"inconsistent checkpoint {path!r}: {e}") from e
