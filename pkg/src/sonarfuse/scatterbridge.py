"""Deformable wavelet scattering feature bridge.

A Morlet filter bank over J scales and K orientations, with one learnable
(delta_j, delta_theta) pair per filter, produces a three-part feature
stack for an input image I:

    S0       = I * phi
    S1(f)    = |I * psi_f| * phi                    (J*K channels)
    S2(a,b)  = ||I * psi_a| * psi_b| * phi, a < b   (C(J*K, 2) channels)

with a < b over the flattened j-major filter index, which gives exactly
1 + JK + JK(JK-1)/2 channels (172 for the default J=3, K=6). The stack is
then bilinearly downsampled by 2 and channel-normalized.

Morlet conventions (the analytic form is a package choice, kept in
BankConfig): scale s = base_scale * 2^(j-1+dj), isotropic Gaussian
envelope sigma = 0.8*s, carrier frequency xi*base_scale/s along the
rotated axis (so the oscillation count per envelope width is scale
independent), DC-corrected to exact zero mean, amplitude 1/s^2 so the L1
norm is stable across scales. phi is a unit-sum Gaussian with sigma=1.

All convolutions use symmetric (edge-repeating) padding. The deployed
path runs over FFTs; `convolve_direct` is the plain spatial-domain
definition and the two must agree to 1e-8 (tests pin this). Kernel
support is frozen over the clamped offset range |dj| <= 0.5 so outputs
are smooth in the offsets; torch autograd supplies exact reverse-mode
gradients. torch.abs on complex values backpropagates z/|z| with 0 at
z = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import _torchops as to
from .imagecore import Image

SIGMA_PER_SCALE = 0.8  # envelope width as a fraction of the scale
PHI_SIGMA = 1.0

DELTA_J_MAX = 0.5  # clamp: half a scale octave


@dataclass(frozen=True)
class BankConfig:
    """Filter bank geometry. theta_k = (k-1)*pi/K for k = 1..K."""

    J: int = 3
    K: int = 6
    kernel_truncation: float = 4.0
    base_scale: float = 2.0
    xi: float = 5 * math.pi / 8  # carrier frequency at base scale, rad/px

    def __post_init__(self):
        if self.J < 1 or self.K < 1:
            raise ValueError(f"need J >= 1 and K >= 1, got J={self.J} K={self.K}")
        if self.kernel_truncation <= 0 or self.base_scale <= 0 or self.xi <= 0:
            raise ValueError("kernel_truncation, base_scale, xi must be positive")

    @property
    def n_filters(self) -> int:
        return self.J * self.K

    @property
    def n_channels(self) -> int:
        n = self.n_filters
        return 1 + n + n * (n - 1) // 2

    def theta(self, k: int) -> float:
        return (k - 1) * math.pi / self.K

    def flat_index(self, j: int, k: int) -> int:
        if not (1 <= j <= self.J and 1 <= k <= self.K):
            raise ValueError(f"filter (j={j}, k={k}) out of range")
        return (j - 1) * self.K + (k - 1)

    def jk_of(self, f: int):
        if not (0 <= f < self.n_filters):
            raise ValueError(f"flat filter index {f} out of range")
        return f // self.K + 1, f % self.K + 1

    def pairs(self):
        """Second-order (a, b) pairs, a < b, lexicographic."""
        n = self.n_filters
        return tuple((a, b) for a in range(n) for b in range(a + 1, n))

    def delta_theta_max(self) -> float:
        return math.pi / (2 * self.K)


class OffsetParams:
    """Per-filter learnable offsets: delta_j (octaves) and delta_theta (rad)."""

    __slots__ = ("delta_j", "delta_theta")

    def __init__(self, delta_j, delta_theta):
        dj = np.array(delta_j, dtype=np.float64)
        dt = np.array(delta_theta, dtype=np.float64)
        if dj.ndim != 1 or dt.shape != dj.shape:
            raise ValueError("delta_j and delta_theta must be equal-length 1D")
        if not (np.isfinite(dj).all() and np.isfinite(dt).all()):
            raise ValueError("offsets must be finite")
        dj.flags.writeable = False
        dt.flags.writeable = False
        self.delta_j = dj
        self.delta_theta = dt

    @classmethod
    def zeros(cls, cfg: BankConfig):
        n = cfg.n_filters
        return cls(np.zeros(n), np.zeros(n))

    def clamped(self, cfg: BankConfig) -> "OffsetParams":
        lim = cfg.delta_theta_max()
        return OffsetParams(
            np.clip(self.delta_j, -DELTA_J_MAX, DELTA_J_MAX),
            np.clip(self.delta_theta, -lim, lim),
        )

    def __len__(self):
        return self.delta_j.shape[0]


@dataclass
class NormState:
    """Per-channel affine for the post-standardization layer."""

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels: int):
        return cls(np.ones(channels), np.zeros(channels))


@dataclass(frozen=True)
class FeatureTensor:
    """H x W x C feature stack with ordered channel labels."""

    values: np.ndarray
    channel_labels: tuple

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"values must be (H, W, C), got {arr.shape}")
        if arr.shape[2] != len(self.channel_labels):
            raise ValueError("channel count does not match labels")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "channel_labels", tuple(self.channel_labels))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def with_values(self, arr) -> "FeatureTensor":
        return FeatureTensor(arr, self.channel_labels)


def channel_labels(cfg: BankConfig) -> tuple:
    """Ordered labels: S0, then S1 in flat order, then S2 pairs."""

    def name(f):
        j, k = cfg.jk_of(f)
        return f"j{j}k{k}"

    labels = ["S0"]
    labels += [f"S1:{name(f)}" for f in range(cfg.n_filters)]
    labels += [f"S2:{name(a)}|{name(b)}" for a, b in cfg.pairs()]
    return tuple(labels)


# ---------------------------------------------------------------------------
# kernels


def morlet_support(cfg: BankConfig, j: int, dj: float = 0.0) -> int:
    """Kernel half-width. Constant over the clamped range |dj| <= 0.5 so
    the kernel grid never changes under training updates (keeps outputs
    smooth in dj); beyond that the support grows with the envelope."""
    eff = max(float(dj), DELTA_J_MAX)
    s = cfg.base_scale * 2.0 ** (j - 1 + eff)
    return math.ceil(cfg.kernel_truncation * SIGMA_PER_SCALE * s)


def _morlet_t(cfg: BankConfig, j: int, theta: float, dj, dtheta, h: int):
    """Complex Morlet kernel as a torch graph over (dj, dtheta)."""
    s = cfg.base_scale * torch.pow(torch.tensor(2.0, dtype=torch.float64),
                                   (j - 1) + dj)
    sigma = SIGMA_PER_SCALE * s
    freq = cfg.xi * cfg.base_scale / s
    ang = theta + dtheta
    r = torch.arange(-h, h + 1, dtype=torch.float64)
    x = r[None, :]
    y = r[:, None]
    u = x * torch.cos(ang) + y * torch.sin(ang)
    g = torch.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    phase = freq * u
    carrier = torch.complex(torch.cos(phase), torch.sin(phase))
    kappa = (g.to(torch.complex128) * carrier).sum() / g.sum()
    return g.to(torch.complex128) * (carrier - kappa) / (s * s).to(torch.complex128)


def build_morlet(cfg: BankConfig, j: int, theta: float,
                 dj: float = 0.0, dtheta: float = 0.0) -> np.ndarray:
    """Morlet kernel at scale index j with offsets applied (complex array)."""
    if not (1 <= j <= cfg.J):
        raise ValueError(f"scale index j={j} out of range 1..{cfg.J}")
    h = morlet_support(cfg, j, dj)
    with torch.no_grad():
        k = _morlet_t(cfg, j, theta,
                      torch.tensor(float(dj), dtype=torch.float64),
                      torch.tensor(float(dtheta), dtype=torch.float64), h)
    return k.numpy()


def gaussian_lowpass(cfg: BankConfig = BankConfig()) -> np.ndarray:
    """Unit-sum Gaussian low-pass phi (sigma = 1, truncated at 4 sigma)."""
    h = math.ceil(cfg.kernel_truncation * PHI_SIGMA)
    r = np.arange(-h, h + 1, dtype=np.float64)
    g = np.exp(-(r[None, :] ** 2 + r[:, None] ** 2) / (2.0 * PHI_SIGMA**2))
    return g / g.sum()


@dataclass(frozen=True)
class FilterBank:
    """Materialized kernels at a fixed set of offsets."""

    cfg: BankConfig
    offsets: OffsetParams
    psi: tuple = field(repr=False)  # complex kernels, flat filter order
    phi: np.ndarray = field(repr=False)
    supports: tuple = ()


def build_bank(cfg: BankConfig, offsets: OffsetParams | None = None) -> FilterBank:
    if offsets is None:
        offsets = OffsetParams.zeros(cfg)
    if len(offsets) != cfg.n_filters:
        raise ValueError(
            f"offsets hold {len(offsets)} filters, bank needs {cfg.n_filters}"
        )
    psi = []
    supports = []
    for f in range(cfg.n_filters):
        j, k = cfg.jk_of(f)
        psi.append(build_morlet(cfg, j, cfg.theta(k),
                                offsets.delta_j[f], offsets.delta_theta[f]))
        supports.append(morlet_support(cfg, j, offsets.delta_j[f]))
    return FilterBank(cfg, offsets, tuple(psi), gaussian_lowpass(cfg),
                      tuple(supports))


# ---------------------------------------------------------------------------
# convolution


def convolve_direct(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Plain spatial-domain 'same' convolution with symmetric padding.

    The definitional path: out[p] = sum_q arr_padded[p - q] kernel[q].
    Slow but simple; the FFT path must match it to 1e-8.
    """
    h = kernel.shape[0] // 2
    from .imagecore import reflect_index

    hh, ww = arr.shape
    iy = np.asarray(reflect_index(np.arange(-h, hh + h), hh))
    ix = np.asarray(reflect_index(np.arange(-h, ww + h), ww))
    padded = arr[np.ix_(iy, ix)]
    win = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel[::-1, ::-1])


def _conv_np(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """FFT convolution of one numpy map with one kernel (via torch)."""
    h = kernel.shape[0] // 2
    x = torch.from_numpy(np.array(arr))  # copy: inputs may be frozen buffers
    k = torch.from_numpy(np.array(kernel))[None]
    out = to.conv_stack_fft(x[None], k, h)[0, 0]
    if not np.iscomplexobj(arr) and not np.iscomplexobj(kernel):
        return out.real.numpy()
    return out.numpy()


# ---------------------------------------------------------------------------
# scattering (public single-channel ops)


def scatter0(img: Image, bank: FilterBank) -> np.ndarray:
    """S0: low-pass the image with phi."""
    return _conv_np(img.pixels, bank.phi)


def _modulus(z: np.ndarray) -> np.ndarray:
    # numpy and torch hypot disagree in the last ulp; use one implementation
    # so the fixed path stays bit-comparable with the deformable one
    return torch.abs(torch.from_numpy(z)).numpy()


def _filter_for(bank: FilterBank, j: int, theta: float) -> int:
    cfg = bank.cfg
    for k in range(1, cfg.K + 1):
        if abs(cfg.theta(k) - theta) < 1e-9:
            return cfg.flat_index(j, k)
    raise ValueError(f"theta={theta} is not one of the bank orientations")


def scatter1(img: Image, bank: FilterBank, j: int, theta: float) -> np.ndarray:
    """S1 = |I * psi_(j,theta)| * phi for one filter."""
    f = _filter_for(bank, j, theta)
    u = _modulus(_conv_np(img.pixels, bank.psi[f]))
    return np.maximum(_conv_np(u, bank.phi), 0.0)


def scatter2(img: Image, bank: FilterBank, pair) -> np.ndarray:
    """S2 = ||I * psi_a| * psi_b| * phi for one ordered pair a < b."""
    a, b = pair
    n = bank.cfg.n_filters
    if not (0 <= a < b < n):
        raise ValueError(f"need 0 <= a < b < {n}, got ({a}, {b})")
    u1 = _modulus(_conv_np(img.pixels, bank.psi[a]))
    u2 = _modulus(_conv_np(u1, bank.psi[b]))
    return np.maximum(_conv_np(u2, bank.phi), 0.0)


# ---------------------------------------------------------------------------
# the full bridge (torch graph)

_PHI_CHUNK = 48


def scatter_stack_torch(img_t: torch.Tensor, cfg: BankConfig, dj_t, dth_t,
                        cache: dict | None = None) -> torch.Tensor:
    """Full-resolution scattering stack as a torch graph: (C, H, W).

    img_t: (H, W) float64. dj_t/dth_t: (J*K,) float64 (may require grad).
    cache, if given, memoizes the padded image FFTs across calls; only
    pass one when img_t carries no gradient and does not change.
    """
    hh, ww = img_t.shape[-2], img_t.shape[-1]
    use_cache = cache is not None and not img_t.requires_grad

    # first order: group filters by scale (shared support size)
    kernel_hats = {}
    sizes = {}
    a1_groups = []
    for j in range(1, cfg.J + 1):
        h = morlet_support(cfg, j)
        kernels = torch.stack([
            _morlet_t(cfg, j, cfg.theta(k),
                      dj_t[cfg.flat_index(j, k)], dth_t[cfg.flat_index(j, k)], h)
            for k in range(1, cfg.K + 1)
        ])
        if use_cache and ("f0", h) in cache:
            x_hat, (p, q) = cache[("f0", h)]
        else:
            x_hat, (p, q) = to.padded_fft2(img_t, h)
            if use_cache:
                cache[("f0", h)] = (x_hat, (p, q))
        k_hat = to.kernel_fft2(kernels, h, p, q)
        kernel_hats[j] = (k_hat, h, p, q)
        sizes[j] = (p, q)
        u = to.conv_from_hats(x_hat[None], k_hat, h, hh, ww)[0]
        a1_groups.append(torch.abs(u))
    a1 = torch.cat(a1_groups, dim=0)  # (JK, H, W)

    # second order: reuse each scale's kernel FFTs (image dims are equal,
    # so the transform sizes match stage one)
    n = cfg.n_filters
    a2_parts = []
    for a in range(n):
        hats_a = {}
        jb_lo = (a + 1) // cfg.K + 1  # first scale that still has b > a
        for j in range(jb_lo, cfg.J + 1):
            k_hat, h, p, q = kernel_hats[j]
            lo = (j - 1) * cfg.K
            sel_lo = max(a + 1, lo)
            rows = slice(sel_lo - lo, cfg.K)
            if rows.start >= cfg.K:
                continue
            if h not in hats_a:
                hats_a[h] = to.padded_fft2(a1[a], h)[0]
            u2 = to.conv_from_hats(hats_a[h][None], k_hat[rows], h, hh, ww)[0]
            a2_parts.append(torch.abs(u2))
    a2 = torch.cat(a2_parts, dim=0) if a2_parts else a1.new_zeros((0, hh, ww))

    # low-pass everything: channel 0 is the raw image (-> S0), the rest are
    # modulus maps (-> S1, S2), clamped at 0 to absorb FFT rounding
    pre = torch.cat([img_t[None], a1, a2], dim=0)
    phi = torch.from_numpy(gaussian_lowpass(cfg))
    h_phi = phi.shape[0] // 2
    outs = []
    for lo in range(0, pre.shape[0], _PHI_CHUNK):
        chunk = pre[lo : lo + _PHI_CHUNK]
        y = to.conv_stack_fft(chunk, phi[None], h_phi)[:, 0].real
        outs.append(y)
    s = torch.cat(outs, dim=0)
    return torch.cat([s[:1], s[1:].clamp_min(0.0)], dim=0)


def normalize_torch(t: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                    eps: float = 1e-5) -> torch.Tensor:
    """Per-channel standardization of a (C, H, W) stack plus affine."""
    mean = t.mean(dim=(-2, -1), keepdim=True)
    var = ((t - mean) ** 2).mean(dim=(-2, -1), keepdim=True)
    z = (t - mean) / torch.sqrt(var + eps)
    return z * gamma[:, None, None] + beta[:, None, None]


def bridge_torch(img_t: torch.Tensor, cfg: BankConfig, dj_t, dth_t,
                 cache: dict | None = None) -> torch.Tensor:
    """Scatter, then bilinear-downsample by 2: (C, H/2, W/2), pre-norm."""
    if img_t.shape[-2] % 2 or img_t.shape[-1] % 2:
        raise ValueError(f"bridge needs even dims, got {tuple(img_t.shape)}")
    return to.bilinear_down2_t(scatter_stack_torch(img_t, cfg, dj_t, dth_t, cache))


def bridge(img: Image, cfg: BankConfig, offsets: OffsetParams | None = None,
           norm: NormState | None = None) -> FeatureTensor:
    """The deformable scattering bridge on one image.

    Concatenates [S0, S1..., S2...], downsamples by 2, and channel-
    normalizes when a NormState is given (norm=None returns the
    pre-normalization tensor).
    """
    if offsets is None:
        offsets = OffsetParams.zeros(cfg)
    if len(offsets) != cfg.n_filters:
        raise ValueError("offset count does not match the bank config")
    with torch.no_grad():
        t = bridge_torch(torch.from_numpy(img.pixels.copy()), cfg,
                         torch.from_numpy(offsets.delta_j.copy()),
                         torch.from_numpy(offsets.delta_theta.copy()))
        if norm is not None:
            t = normalize_torch(t, torch.from_numpy(np.asarray(norm.gamma, dtype=np.float64)),
                                torch.from_numpy(np.asarray(norm.beta, dtype=np.float64)),
                                norm.eps)
    return FeatureTensor(t.permute(1, 2, 0).numpy(), channel_labels(cfg))


def bridge_backward(img: Image, cfg: BankConfig, offsets: OffsetParams,
                    upstream: np.ndarray) -> dict:
    """Exact reverse-mode gradients of the pre-norm bridge output.

    upstream must match the bridge output shape (H/2, W/2, C). Returns
    gradients for delta_j, delta_theta, and the input pixels.
    """
    hh, ww = img.shape
    want = (hh // 2, ww // 2, cfg.n_channels)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != want:
        raise ValueError(f"upstream shape {up.shape} != bridge output {want}")
    img_t = torch.from_numpy(img.pixels.copy()).requires_grad_(True)
    dj_t = torch.from_numpy(offsets.delta_j.copy()).requires_grad_(True)
    dth_t = torch.from_numpy(offsets.delta_theta.copy()).requires_grad_(True)
    out = bridge_torch(img_t, cfg, dj_t, dth_t)
    loss = (out * torch.from_numpy(up).permute(2, 0, 1)).sum()
    loss.backward()

    def grad_of(t):
        return np.zeros(t.shape) if t.grad is None else t.grad.numpy().copy()

    return {
        "delta_j": grad_of(dj_t),
        "delta_theta": grad_of(dth_t),
        "image": grad_of(img_t),
    }
