"""Self-supervised trainer: median reference, contrast losses, Adam loop.

No clean ground truth exists, so the target J* is the pixel-wise median
of the raw frames at base resolution. The total objective

    L = L_down + lambda_con * L_con + lambda_grad * L_grad

compares h = H(Y), the factor-2 bicubic downsample of the output, with
J*: L_down is the pixel-mean squared error, L_con penalizes changes in
absolute local contrast (|h_p - h_q| vs |j_p - j_q| over the four
neighbors of every interior pixel, normalized by 4P), and L_grad does
the same for forward-difference gradient magnitudes, averaged over the
two components. All three are exactly zero when H(Y) = J*, and H is the
bit-exact twin of the file-level bicubic so that identity is achievable.

The halving convention keeps dimensions consistent: without sr2x the
network output has frame dims (H, W) and J* is the downsampled median at
(H/2, W/2); with sr2x the output is (2H, 2W) and J* is the median
itself.

Training runs plain single-sample Adam, round-robin over sequences, and
projects the filter offsets back onto their clamp box after every step.
A non-finite loss aborts with a diagnostic checkpoint so the run can be
inspected. Ablation variants replace the scattering features with a
fixed per-frame stack [raw, feature_map] (or raw alone); those inputs
carry no learnable offsets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import _torchops as to
from .errors import NumericError
from .featurebank import FeatureMapKind, feature_map
from .fusenet import (
    FrameSequence,
    TrainedState,
    canonical_order,
    forward_t,
    fuse_from_feats_t,
    init_model,
)
from .imagecore import Image, atomic_write_bytes, bicubic_downsample2
from .scatterbridge import (
    DELTA_J_MAX,
    BankConfig,
    NormState,
    OffsetParams,
    bridge_torch,
    normalize_torch,
)

LAMBDA_CON = 0.1
LAMBDA_GRAD = 0.1

TRACE_HEADER = ("step", "loss_total", "loss_down", "loss_con", "loss_grad")

_VARIANT_FEATURES = {
    "flr": None,
    "flr+hog": FeatureMapKind.HOG,
    "flr+canny": FeatureMapKind.CANNY,
    "flr+gre": FeatureMapKind.GRE,
    "flr+haar": FeatureMapKind.HAAR,
}


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 200
    lr: float = 1e-3
    lambda_con: float = LAMBDA_CON
    lambda_grad: float = LAMBDA_GRAD
    c_lat: int = 32
    seed: int = 0
    sr2x: bool = False
    variant: str = "wst"


def input_channels(variant: str, bank: BankConfig) -> int:
    if variant == "wst":
        return bank.n_channels
    if variant == "flr":
        return 1
    if variant in _VARIANT_FEATURES:
        return 2
    raise ValueError(f"unknown variant {variant!r}")


def frame_stack(img: Image, variant: str) -> np.ndarray:
    """Fixed per-frame input stack for the non-scattering variants."""
    kind = _VARIANT_FEATURES[variant]
    if kind is None:
        return img.pixels[:, :, None].copy()
    return np.stack([img.pixels, feature_map(img, kind).pixels], axis=2)


def init_state(bank: BankConfig, variant: str = "wst", c_lat: int = 32,
               seed: int = 0, sr2x: bool = False) -> TrainedState:
    c_in = input_channels(variant, bank)
    return TrainedState(
        bank=bank,
        offsets=OffsetParams.zeros(bank),
        norm=NormState.identity(c_in),
        model=init_model(c_in, c_lat, seed=seed, sr2x=sr2x),
        variant=variant,
        init_seed=seed,
    ).check()


def median_reference(seq: FrameSequence, sr2x: bool = False) -> np.ndarray:
    """Pixel-wise median of the raw frames, at the dims of H(Y)."""
    med = np.median(np.stack([f.pixels for f in seq.frames]), axis=0)
    if sr2x:
        return med
    return bicubic_downsample2(Image(med)).pixels.copy()


# ---------------------------------------------------------------------------
# losses (torch graph + numpy-facing wrapper)


def loss_down_t(h: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
    return ((h - j) ** 2).mean()


def loss_con_t(h: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
    hh, ww = h.shape
    if hh < 3 or ww < 3:
        return torch.zeros((), dtype=h.dtype)
    hc = h[1:-1, 1:-1]
    jc = j[1:-1, 1:-1]
    total = torch.zeros((), dtype=h.dtype)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        hq = h[1 + dy : hh - 1 + dy, 1 + dx : ww - 1 + dx]
        jq = j[1 + dy : hh - 1 + dy, 1 + dx : ww - 1 + dx]
        total = total + torch.abs(
            torch.abs(hc - hq) - torch.abs(jc - jq)
        ).sum()
    return total / (4.0 * (hh - 2) * (ww - 2))


def loss_grad_t(h: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
    gx = torch.abs(torch.abs(h[:, 1:] - h[:, :-1]) -
                   torch.abs(j[:, 1:] - j[:, :-1])).mean()
    gy = torch.abs(torch.abs(h[1:, :] - h[:-1, :]) -
                   torch.abs(j[1:, :] - j[:-1, :])).mean()
    return 0.5 * (gx + gy)


def loss_terms_t(y: torch.Tensor, jstar: torch.Tensor,
                 lambda_con: float = LAMBDA_CON,
                 lambda_grad: float = LAMBDA_GRAD) -> dict:
    if (y.shape[-2] != 2 * jstar.shape[-2]
            or y.shape[-1] != 2 * jstar.shape[-1]):
        raise ValueError(
            f"reference dims {tuple(jstar.shape)} must be half of output "
            f"dims {tuple(y.shape)}"
        )
    h = to.bicubic_down2_t(y)
    down = loss_down_t(h, jstar)
    con = loss_con_t(h, jstar)
    grad = loss_grad_t(h, jstar)
    total = down + lambda_con * con + lambda_grad * grad
    return {"total": total, "down": down, "con": con, "grad": grad}


def losses(y, jstar, lambda_con: float = LAMBDA_CON,
           lambda_grad: float = LAMBDA_GRAD) -> dict:
    """Loss terms as plain floats. y: the output image; jstar: reference."""
    y_arr = y.pixels if isinstance(y, Image) else np.asarray(y, dtype=np.float64)
    j_arr = np.asarray(jstar, dtype=np.float64)
    with torch.no_grad():
        terms = loss_terms_t(
            torch.from_numpy(y_arr.copy()), torch.from_numpy(j_arr.copy()),
            lambda_con, lambda_grad,
        )
    return {k: float(v) for k, v in terms.items()}


# ---------------------------------------------------------------------------
# parameter registry and the variant-aware forward


def _trainable_tensors(state: TrainedState, requires_grad: bool = True) -> dict:
    """Named trainables: conv params, norm affine, offsets (wst only)."""
    out = {}
    for name, arr in state.model.params.items():
        out[name] = torch.from_numpy(np.array(arr))
    out["norm.gamma"] = torch.from_numpy(np.asarray(state.norm.gamma,
                                                    dtype=np.float64).copy())
    out["norm.beta"] = torch.from_numpy(np.asarray(state.norm.beta,
                                                   dtype=np.float64).copy())
    if state.variant == "wst":
        out["offsets.delta_j"] = torch.from_numpy(state.offsets.delta_j.copy())
        out["offsets.delta_theta"] = torch.from_numpy(
            state.offsets.delta_theta.copy())
    for t in out.values():
        t.requires_grad_(requires_grad)
    return out


def _state_with(state: TrainedState, tensors: dict) -> TrainedState:
    params = {name: tensors[name].detach().numpy().copy()
              for name in state.model.params}
    model = replace(state.model, params=params)
    norm = NormState(tensors["norm.gamma"].detach().numpy().copy(),
                     tensors["norm.beta"].detach().numpy().copy(),
                     eps=state.norm.eps)
    offsets = state.offsets
    if state.variant == "wst":
        offsets = OffsetParams(
            tensors["offsets.delta_j"].detach().numpy().copy(),
            tensors["offsets.delta_theta"].detach().numpy().copy(),
        )
    return replace(state, model=model, norm=norm, offsets=offsets)


class _SeqInputs:
    """Per-sequence constants: ordered frame tensors, stacks, FFT caches."""

    def __init__(self, state: TrainedState, seq: FrameSequence, sr2x: bool):
        order = canonical_order(seq)
        self.jstar = torch.from_numpy(median_reference(seq, sr2x))
        if state.variant == "wst":
            self.frames = [
                torch.from_numpy(seq.frames[i].pixels.copy()) for i in order
            ]
            self.caches = [{} for _ in order]
            self.stacks = None
        else:
            # fixed inputs: raw plus feature map, halved to latent dims
            self.frames = None
            self.caches = None
            with torch.no_grad():
                self.stacks = [
                    to.bilinear_down2_t(
                        torch.from_numpy(
                            frame_stack(seq.frames[i], state.variant)
                        ).permute(2, 0, 1)
                    )
                    for i in order
                ]


def _forward_from_inputs(state: TrainedState, inputs: _SeqInputs,
                         tensors: dict) -> torch.Tensor:
    gamma, beta = tensors["norm.gamma"], tensors["norm.beta"]
    if state.variant == "wst":
        return forward_t(
            inputs.frames, state.bank,
            tensors["offsets.delta_j"], tensors["offsets.delta_theta"],
            gamma, beta, tensors, state.model.sr2x, state.norm.eps,
            caches=inputs.caches,
        )
    feats = [normalize_torch(s, gamma, beta, state.norm.eps)
             for s in inputs.stacks]
    return fuse_from_feats_t(feats, tensors, state.model.sr2x)


def sequence_loss(state: TrainedState, seq: FrameSequence,
                  lambda_con: float = LAMBDA_CON,
                  lambda_grad: float = LAMBDA_GRAD) -> dict:
    """Loss terms of the current state on one sequence, as floats."""
    inputs = _SeqInputs(state, seq, state.model.sr2x)
    tensors = _trainable_tensors(state, requires_grad=False)
    with torch.no_grad():
        y = _forward_from_inputs(state, inputs, tensors)
        terms = loss_terms_t(y, inputs.jstar, lambda_con, lambda_grad)
    return {k: float(v) for k, v in terms.items()}


def dataset_loss(state: TrainedState, sequences,
                 lambda_con: float = LAMBDA_CON,
                 lambda_grad: float = LAMBDA_GRAD) -> dict:
    """Mean loss terms over a list of sequences."""
    acc = {"total": 0.0, "down": 0.0, "con": 0.0, "grad": 0.0}
    for seq in sequences:
        terms = sequence_loss(state, seq, lambda_con, lambda_grad)
        for k in acc:
            acc[k] += terms[k]
    return {k: v / len(sequences) for k, v in acc.items()}


def loss_and_grads(state: TrainedState, seq: FrameSequence,
                   lambda_con: float = LAMBDA_CON,
                   lambda_grad: float = LAMBDA_GRAD):
    """One reverse-mode pass: (loss floats, gradient arrays by name).

    Parameters that do not influence the loss get explicit zero grads.
    """
    inputs = _SeqInputs(state, seq, state.model.sr2x)
    tensors = _trainable_tensors(state, requires_grad=True)
    y = _forward_from_inputs(state, inputs, tensors)
    terms = loss_terms_t(y, inputs.jstar, lambda_con, lambda_grad)
    terms["total"].backward()
    grads = {}
    for name, t in tensors.items():
        g = t.grad
        grads[name] = (np.zeros(tuple(t.shape)) if g is None
                       else g.numpy().copy())
    return {k: float(v.detach()) for k, v in terms.items()}, grads


def enhance_sequence(state: TrainedState, seq: FrameSequence) -> Image:
    """Run the trained pipeline on one sequence."""
    hh, ww = seq.frames[0].shape
    if hh % 2 or ww % 2:
        raise ValueError(f"frames must have even dims, got {hh}x{ww}")
    inputs = _SeqInputs(state, seq, state.model.sr2x)
    tensors = _trainable_tensors(state, requires_grad=False)
    with torch.no_grad():
        y = _forward_from_inputs(state, inputs, tensors)
    return Image(y.numpy())


# ---------------------------------------------------------------------------
# the optimizer loop


def write_trace(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(TRACE_HEADER)
    for row in rows:
        w.writerow([row[0]] + [repr(v) for v in row[1:]])
    atomic_write_bytes(path, buf.getvalue().encode("ascii"))


def train(state: TrainedState, sequences, settings: TrainSettings,
          diag_path=None):
    """Adam over sequences round-robin. Returns (state, trace rows).

    Trace rows are (step, total, down, con, grad) with the loss evaluated
    before each update. A non-finite loss writes a diagnostic checkpoint
    of the pre-update parameters to diag_path (if given) and raises
    NumericError.
    """
    if not sequences:
        raise ValueError("train needs at least one sequence")
    state.check()
    tensors = _trainable_tensors(state, requires_grad=True)
    names = list(tensors.keys())
    opt = torch.optim.Adam([tensors[n] for n in names], lr=settings.lr,
                           betas=(0.9, 0.999), eps=1e-8)
    per_seq = [_SeqInputs(state, s, state.model.sr2x) for s in sequences]
    theta_lim = state.bank.delta_theta_max()
    rows = []
    for step in range(1, settings.steps + 1):
        inputs = per_seq[(step - 1) % len(sequences)]
        y = _forward_from_inputs(state, inputs, tensors)
        terms = loss_terms_t(y, inputs.jstar, settings.lambda_con,
                             settings.lambda_grad)
        total = terms["total"]
        if not bool(torch.isfinite(total)):
            if diag_path is not None:
                from .fusenet import save_checkpoint

                save_checkpoint(_state_with(state, tensors), diag_path)
            raise NumericError(
                f"non-finite loss at step {step}"
                + (f"; diagnostic checkpoint at {diag_path}" if diag_path
                   else "")
            )
        rows.append((step, float(total.detach()),
                     float(terms["down"].detach()),
                     float(terms["con"].detach()),
                     float(terms["grad"].detach())))
        opt.zero_grad()
        total.backward()
        opt.step()
        if state.variant == "wst":
            with torch.no_grad():
                tensors["offsets.delta_j"].clamp_(-DELTA_J_MAX, DELTA_J_MAX)
                tensors["offsets.delta_theta"].clamp_(-theta_lim, theta_lim)
    return _state_with(state, tensors), rows
