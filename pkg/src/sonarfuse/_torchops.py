"""Shared torch primitives: symmetric padding, FFT convolution, and the
torch twins of the numpy resamplers.

Everything runs in float64/complex128 on CPU. The two downsamplers mirror
their numpy counterparts in imagecore operation for operation, so both
sides produce bit-identical outputs on identical input; tests lock this.
"""

from __future__ import annotations

import torch

from .imagecore import _CR_INNER, _CR_OUTER


def fast_len(n: int) -> int:
    """Smallest 5-smooth integer >= n (efficient FFT size)."""
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


def reflect_indices(n: int, pad: int) -> torch.Tensor:
    """Source indices realizing symmetric (edge-repeating) padding."""
    idx = torch.arange(-pad, n + pad, dtype=torch.int64)
    m = torch.remainder(idx, 2 * n)
    return torch.where(m < n, m, 2 * n - 1 - m)


def pad_reflect(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Symmetric-pad the last two dims by `pad`. Differentiable (gather)."""
    iy = reflect_indices(x.shape[-2], pad)
    ix = reflect_indices(x.shape[-1], pad)
    return x[..., iy[:, None], ix[None, :]]


def padded_fft2(x: torch.Tensor, h: int):
    """Symmetric-pad by h then FFT at 5-smooth sizes.

    x: (..., H, W). Returns (x_hat, (P, Q)). Zero-extension past the padded
    region is safe: the cropped output window never reads those samples.
    """
    hh, ww = x.shape[-2], x.shape[-1]
    p, q = fast_len(hh + 2 * h), fast_len(ww + 2 * h)
    return torch.fft.fft2(pad_reflect(x, h), s=(p, q)), (p, q)


def kernel_fft2(kernels: torch.Tensor, h: int, p: int, q: int) -> torch.Tensor:
    """FFT of (M, 2h+1, 2h+1) kernels embedded centered at the origin."""
    emb = torch.zeros((kernels.shape[0], p, q), dtype=torch.complex128)
    idx = torch.arange(-h, h + 1, dtype=torch.int64)
    ry = torch.remainder(idx, p)
    rx = torch.remainder(idx, q)
    emb[:, ry[:, None], rx[None, :]] = kernels.to(torch.complex128)
    return torch.fft.fft2(emb)


def conv_from_hats(x_hat: torch.Tensor, k_hat: torch.Tensor, h: int,
                   out_h: int, out_w: int) -> torch.Tensor:
    """Finish the convolution: multiply, invert, crop the valid window.

    x_hat: (B, P, Q); k_hat: (M, P, Q). Returns complex (B, M, out_h, out_w),
    the 'same'-size convolution of the symmetric-padded input.
    """
    y = torch.fft.ifft2(x_hat[:, None] * k_hat[None])
    return y[..., h : h + out_h, h : h + out_w]


def conv_stack_fft(x: torch.Tensor, kernels: torch.Tensor, h: int) -> torch.Tensor:
    """Convolve (B, H, W) maps with (M, k, k) kernels, symmetric padding."""
    hh, ww = x.shape[-2], x.shape[-1]
    x_hat, (p, q) = padded_fft2(x, h)
    k_hat = kernel_fft2(kernels, h, p, q)
    return conv_from_hats(x_hat, k_hat, h, hh, ww)


def _catrom_halve_rows_t(x: torch.Tensor) -> torch.Tensor:
    h = x.shape[-2]
    i = torch.arange(h // 2, dtype=torch.int64)
    n2 = 2 * h
    r0 = torch.remainder(2 * i - 1, n2)
    r0 = torch.where(r0 < h, r0, n2 - 1 - r0)
    r3 = torch.remainder(2 * i + 2, n2)
    r3 = torch.where(r3 < h, r3, n2 - 1 - r3)
    a0 = x[..., r0, :]
    a1 = x[..., 2 * i, :]
    a2 = x[..., 2 * i + 1, :]
    a3 = x[..., r3, :]
    return (_CR_OUTER * a0 + _CR_INNER * a1) + (_CR_INNER * a2 + _CR_OUTER * a3)


def bicubic_down2_t(x: torch.Tensor) -> torch.Tensor:
    """Torch twin of imagecore.bicubic_downsample2 (bit-identical)."""
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"bicubic_down2_t needs even dims, got {tuple(x.shape)}")
    out = _catrom_halve_rows_t(x)
    return _catrom_halve_rows_t(out.transpose(-1, -2)).transpose(-1, -2)


def bilinear_down2_t(x: torch.Tensor) -> torch.Tensor:
    """Torch twin of imagecore.bilinear_downsample2 (bit-identical)."""
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"bilinear_down2_t needs even dims, got {tuple(x.shape)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return (((a + b) + c) + d) * 0.25
