"""Built-in verification of the numeric core.

Seven independent checks, each with its own oracle: brute-force loops,
finite differences, or exact identities. A check returns (ok, detail);
run_all wraps each in a timer and turns an unexpected exception into a
failure instead of aborting the suite. Oracles are evaluated here, not
imported from the modules under test; metric functions are looked up on
the metrics module at call time so an instrumented build is caught.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import fusenet, metrics
from .fusenet import FrameSequence, init_model
from .imagecore import Image, bicubic_downsample2, bilinear_downsample2
from .scatterbridge import (
    BankConfig,
    NormState,
    OffsetParams,
    bridge,
    build_bank,
    scatter0,
    scatter1,
    scatter2,
)
from .training import init_state, loss_and_grads, losses, sequence_loss

DEFAULT_BANK = BankConfig()


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _check_channel_arithmetic():
    """172 channels at half resolution from a 64x64 image, under 1 s."""
    cfg = DEFAULT_BANK
    img = Image(np.random.default_rng(101).uniform(0.0, 1.0, (64, 64)))
    bridge(Image(np.zeros((16, 16))), cfg)  # warm-up: FFT plans, allocator
    t0 = time.perf_counter()
    ft = bridge(img, cfg)
    dt = time.perf_counter() - t0
    want = 1 + cfg.n_filters + cfg.n_filters * (cfg.n_filters - 1) // 2
    shape = (ft.height, ft.width, ft.channels)
    ok = shape == (32, 32, want) and want == 172 and dt < 1.0
    return ok, f"{shape[0]}x{shape[1]}x{shape[2]} in {dt:.3f}s (limit 1s)"


def _fixed_reference(img: Image, cfg: BankConfig) -> np.ndarray:
    """Per-filter scattering path on a materialized zero-offset bank."""
    bank = build_bank(cfg)
    chans = [scatter0(img, bank)]
    for f in range(cfg.n_filters):
        j, k = cfg.jk_of(f)
        chans.append(scatter1(img, bank, j, cfg.theta(k)))
    for pair in cfg.pairs():
        chans.append(scatter2(img, bank, pair))
    return bilinear_downsample2(np.stack(chans, axis=-1))


def _check_zero_offset_equivalence():
    """Deformable bridge at zero offsets == fixed path, bit for bit."""
    cfg = DEFAULT_BANK
    rng = np.random.default_rng(202)
    hits = 0
    for _ in range(10):
        img = Image(rng.uniform(0.0, 1.0, (32, 32)))
        got = bridge(img, cfg, OffsetParams.zeros(cfg)).values
        hits += np.array_equal(got, _fixed_reference(img, cfg))
    return hits == 10, f"{hits}/10 images bitwise-equal to the fixed path"


def _grad_setup():
    bank = BankConfig(J=2, K=2)
    state = init_state(bank, variant="wst", c_lat=4, seed=5)
    rng = np.random.default_rng(55)
    state = replace(
        state,
        offsets=OffsetParams(rng.uniform(-0.2, 0.2, bank.n_filters),
                             rng.uniform(-0.2, 0.2, bank.n_filters)),
        norm=NormState(1.0 + 0.1 * rng.standard_normal(state.norm.gamma.shape),
                       0.1 * rng.standard_normal(state.norm.beta.shape)),
    )
    frames = tuple(Image(rng.uniform(size=(8, 8))) for _ in range(2))
    seq = FrameSequence(frames, rng.uniform(0.0, 2 * math.pi, 2))
    return state, seq


def _perturbed(state, name, idx, delta):
    if name in state.model.params:
        params = {k: v.copy() for k, v in state.model.params.items()}
        params[name][idx] += delta
        return replace(state, model=replace(state.model, params=params))
    if name == "norm.gamma":
        g = state.norm.gamma.copy()
        g[idx] += delta
        return replace(state, norm=NormState(g, state.norm.beta, state.norm.eps))
    if name == "norm.beta":
        b = state.norm.beta.copy()
        b[idx] += delta
        return replace(state, norm=NormState(state.norm.gamma, b, state.norm.eps))
    if name == "offsets.delta_j":
        dj = state.offsets.delta_j.copy()
        dj[idx] += delta
        return replace(state, offsets=OffsetParams(dj, state.offsets.delta_theta))
    dt = state.offsets.delta_theta.copy()
    dt[idx] += delta
    return replace(state, offsets=OffsetParams(state.offsets.delta_j, dt))


def _check_gradient_fidelity():
    """Reverse-mode grads vs central differences on 100+ parameters."""
    state, seq = _grad_setup()
    _, grads = loss_and_grads(state, seq)

    picks = []
    n_off = len(state.offsets)
    picks += [("offsets.delta_j", (i,)) for i in range(n_off)]
    picks += [("offsets.delta_theta", (i,)) for i in range(n_off)]
    rng = np.random.default_rng(56)
    for name, arr in state.model.params.items():
        take = arr.size if arr.size <= 4 else 12
        flat = rng.choice(arr.size, size=take, replace=False)
        picks += [(name, np.unravel_index(f, arr.shape)) for f in flat]
    for i in range(0, state.norm.gamma.shape[0], 2):
        picks += [("norm.gamma", (i,)), ("norm.beta", (i,))]

    step = 1e-4
    worst = 0.0
    ok = len(picks) >= 100
    for name, idx in picks:
        lo = sequence_loss(_perturbed(state, name, idx, -step), seq)["total"]
        hi = sequence_loss(_perturbed(state, name, idx, +step), seq)["total"]
        fd = (hi - lo) / (2 * step)
        err = abs(grads[name][idx] - fd) / max(abs(fd), 1e-8)
        worst = max(worst, err)
        ok = ok and err < 1e-4
    return ok, f"{len(picks)} params, max rel err {worst:.2e} (tol 1e-4)"


def _check_shift_stability():
    """Features move less than pixels under a 2-px shift, 20/20 fields."""
    from scipy import ndimage

    cfg = DEFAULT_BANK
    rng = np.random.default_rng(303)
    wins = 0
    for _ in range(20):
        arr = ndimage.gaussian_filter(rng.standard_normal((64, 64)), 2.0,
                                      mode="wrap")
        rolled = np.roll(arr, 2, axis=0)
        fa = bridge(Image(arr), cfg).values
        fb = bridge(Image(rolled), cfg).values
        feat = np.linalg.norm(fa - fb) / np.linalg.norm(fa)
        pix = np.linalg.norm(arr - rolled) / np.linalg.norm(arr)
        wins += feat < pix
    return wins == 20, f"{wins}/20 shifted fields contracted in feature space"


def _check_metric_oracles():
    """std/ag against explicit double loops; constants hit (0, 0) exactly."""
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        arr = rng.uniform(0.0, 1.0, (12, 12))
        v = arr * 255.0
        n = v.size
        mean = sum(v[i, j] for i in range(12) for j in range(12)) / n
        var = sum((v[i, j] - mean) ** 2 for i in range(12)
                  for j in range(12)) / n
        std_want = math.sqrt(var)
        acc = 0.0
        for i in range(1, 12):
            for j in range(1, 12):
                dx = v[i, j] - v[i, j - 1]
                dy = v[i, j] - v[i - 1, j]
                acc += math.sqrt(dx * dx + dy * dy)
        ag_want = acc / (11 * 11)
        img = Image(arr)
        worst = max(worst, abs(metrics.std_metric(img) - std_want),
                    abs(metrics.ag_metric(img) - ag_want))
    flat = Image(np.full((9, 9), 0.37))
    exact = metrics.std_metric(flat) == 0.0 and metrics.ag_metric(flat) == 0.0
    ok = worst <= 1e-9 and exact
    return ok, (f"50 images, max abs err {worst:.2e} (tol 1e-9); "
                f"constant -> (0, 0) {'exact' if exact else 'NOT exact'}")


def _check_loss_identities():
    """All three terms vanish when the target is met; none goes negative."""
    rng = np.random.default_rng(505)
    y = rng.uniform(0.0, 1.0, (16, 16))
    jstar = bicubic_downsample2(Image(y)).pixels
    at_target = losses(y, jstar)
    zero = all(at_target[k] == 0.0 for k in ("total", "down", "con", "grad"))
    neg = 0
    for _ in range(100):
        t = losses(rng.uniform(0.0, 1.0, (16, 16)),
                   rng.uniform(0.0, 1.0, (8, 8)))
        neg += any(t[k] < 0.0 for k in ("total", "down", "con", "grad"))
    ok = zero and neg == 0
    return ok, (f"at-target terms {'all zero' if zero else 'NONZERO'}; "
                f"{100 - neg}/100 random pairs nonnegative")


def _check_fusion_invariances():
    """Merge symmetry, merge count, and frame-order independence."""
    rng = np.random.default_rng(606)
    model = init_model(c_in=3, c_lat=4, seed=11)
    a = rng.standard_normal((8, 8, 4))
    b = rng.standard_normal((8, 8, 4))
    sym = np.array_equal(fusenet.fuse_pair(a, b, model),
                         fusenet.fuse_pair(b, a, model))

    calls = 0
    real = fusenet.fuse_pair

    def counting(x, y, m):
        nonlocal calls
        calls += 1
        return real(x, y, m)

    fusenet.fuse_pair = counting
    try:
        fusenet.fuse_tree([rng.standard_normal((8, 8, 4)) for _ in range(16)],
                          model)
    finally:
        fusenet.fuse_pair = real
    count_ok = calls == 15

    cfg = BankConfig(J=2, K=2)
    perm_ok = True
    for s in range(5):
        r = np.random.default_rng(700 + s)
        mdl = init_model(c_in=cfg.n_channels, c_lat=2, seed=s)
        offs = OffsetParams(r.uniform(-0.2, 0.2, cfg.n_filters),
                            r.uniform(-0.2, 0.2, cfg.n_filters))
        frames = tuple(Image(r.uniform(size=(8, 8))) for _ in range(4))
        poses = r.uniform(0.0, 2 * math.pi, 4)
        seq = FrameSequence(frames, poses)
        base = fusenet.forward(seq, cfg, offs, mdl).pixels
        p = r.permutation(4)
        shuffled = FrameSequence(tuple(frames[i] for i in p), poses[p])
        perm_ok &= np.array_equal(
            fusenet.forward(shuffled, cfg, offs, mdl).pixels, base)

    ok = sym and count_ok and perm_ok
    return ok, (f"pair symmetry {'bitwise' if sym else 'BROKEN'}; "
                f"16 frames -> {calls} merges (want 15); "
                f"frame order {'irrelevant' if perm_ok else 'LEAKS'} "
                f"on 5 models")


_CHECKS = (
    ("channel-arithmetic", _check_channel_arithmetic),
    ("zero-offset-equivalence", _check_zero_offset_equivalence),
    ("gradient-fidelity", _check_gradient_fidelity),
    ("shift-stability", _check_shift_stability),
    ("metric-oracles", _check_metric_oracles),
    ("loss-identities", _check_loss_identities),
    ("fusion-invariances", _check_fusion_invariances),
)


def run_all(progress=None) -> list:
    """Run every check; a raised exception counts as a failure."""
    results = []
    for name, fn in _CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, detail,
                                   time.perf_counter() - t0))
        if progress is not None:
            progress(results[-1])
    return results
