"""Dense linear algebra, a first-order linear-recurrence scan, and FFT causal convolution.

Everything is float64. All functions are pure and deterministic: identical
inputs produce bit-identical outputs, which the gradient-engine comparisons
rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# A Tensor2 is a 2-D float64 ndarray (row-major). Kept as a plain alias so the
# rest of the package composes with numpy instead of wrapping it.
Tensor2 = np.ndarray


def as_tensor2(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything of the wrong rank."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def validate_tensor2(x, name: str = "tensor") -> np.ndarray:
    """as_tensor2 plus a finiteness check; NaN/Inf entries are a hard error."""
    arr = as_tensor2(x, name)
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr).ravel())[0])
        r, c = divmod(bad, arr.shape[1])
        raise ValueError(f"{name} contains a non-finite entry at ({r}, {c})")
    return arr


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    """Dense matrix product with optional transposes, C = op(A) op(B).

    Raises on inner-dimension mismatch with both operand shapes in the
    message. Summation order is fixed by the underlying kernel, so repeated
    calls on identical inputs are bit-identical.
    """
    a = as_tensor2(a, "gemm operand a")
    b = as_tensor2(b, "gemm operand b")
    aa = a.T if transpose_a else a
    bb = b.T if transpose_b else b
    if aa.shape[1] != bb.shape[0]:
        raise ValueError(
            f"gemm dimension mismatch: op(a) is {aa.shape}, op(b) is {bb.shape} "
            f"(a {a.shape} transpose_a={transpose_a}, b {b.shape} transpose_b={transpose_b})"
        )
    return aa @ bb


@dataclass
class ScanElem:
    """One step of the recurrence out[k] = add[k] + mult[k] * out[k-1]."""

    mult: np.ndarray
    add: np.ndarray

    def __post_init__(self):
        self.mult = np.asarray(self.mult, dtype=np.float64)
        self.add = np.asarray(self.add, dtype=np.float64)
        if self.mult.shape != self.add.shape or self.mult.ndim != 1:
            raise ValueError(
                f"ScanElem needs matching 1-D mult/add, got {self.mult.shape} and {self.add.shape}"
            )


def combine_scan(first: ScanElem, second: ScanElem) -> ScanElem:
    """Associative composition: applying `first` then `second` as one step."""
    return ScanElem(
        mult=first.mult * second.mult,
        add=second.add + second.mult * first.add,
    )


def scan_inclusive_arrays(mult: np.ndarray, add: np.ndarray) -> np.ndarray:
    """Inclusive scan of the recurrence along axis 0, log-depth sweeps.

    `mult` must broadcast against `add`; both carry time on axis 0. Returns an
    array shaped like `add` where out[0] = add[0] and
    out[k] = add[k] + mult[k] * out[k-1].
    """
    m = np.array(np.broadcast_to(mult, mult.shape), dtype=np.float64, copy=True)
    out = np.array(add, dtype=np.float64, copy=True)
    steps = out.shape[0]
    offset = 1
    while offset < steps:
        # Hillis-Steele sweep: element k absorbs the window ending at k-offset.
        new_m = m[offset:] * m[:-offset]
        new_a = out[offset:] + m[offset:] * out[:-offset]
        m[offset:] = new_m
        out[offset:] = new_a
        offset *= 2
    return out


def linear_recurrence_scan(elems: Sequence[ScanElem]) -> np.ndarray:
    """Evaluate out[k] = elems[k].add + elems[k].mult * out[k-1] for all k.

    Runs the associative-combine formulation in O(log T) sweeps rather than a
    sequential loop. Input order is forward order; callers wanting the
    reverse-time reading reverse before and after.

    Returns a (T, d) array; row k is out[k].
    """
    if len(elems) == 0:
        raise ValueError("linear_recurrence_scan needs at least one element")
    d = elems[0].mult.shape[0]
    for i, e in enumerate(elems):
        if e.mult.shape[0] != d:
            raise ValueError(
                f"scan element {i} has dimension {e.mult.shape[0]}, expected {d}"
            )
    mult = np.stack([e.mult for e in elems])
    add = np.stack([e.add for e in elems])
    return scan_inclusive_arrays(mult, add)


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def fft_pow2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 transform along axis 0; length must be a power of two.

    Vectorized over any trailing axes. The inverse applies the 1/N scale.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if n & (n - 1) != 0 or n == 0:
        raise ValueError(f"fft_pow2 needs a power-of-two length, got {n}")
    out = np.array(x[_bit_reverse_indices(n)], dtype=np.complex128, copy=True)
    half = 1
    while half < n:
        step = half * 2
        sign = 2j if inverse else -2j
        twiddle = np.exp(sign * np.pi * np.arange(half) / step)
        twiddle = twiddle.reshape((1, half) + (1,) * (out.ndim - 1))
        blocks = out.reshape((n // step, step) + out.shape[1:])
        spun = blocks[:, half:] * twiddle
        blocks[:, half:] = blocks[:, :half] - spun
        blocks[:, :half] += spun
        half = step
    if inverse:
        out /= n
    return out


def suffix_convolve_fft(errors: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Core of causal_conv_fft on (T, C) channel arrays, no shape policing."""
    steps = errors.shape[0]
    if steps == 1:
        return errors * kernel[0]
    n = next_pow2(2 * steps - 1)
    pad = ((0, n - steps),) + ((0, 0),) * (errors.ndim - 1)
    flipped = np.pad(errors[::-1], pad)
    kpad = np.pad(kernel, pad)
    spectrum = fft_pow2(flipped) * fft_pow2(kpad)
    full = fft_pow2(spectrum, inverse=True).real[:steps]
    return full[::-1].copy()


def causal_conv_fft(errors, kernel) -> np.ndarray:
    """Suffix-aligned convolution: out[t] = sum_k kernel[k] * errors[t + k].

    Both arguments are (T, d); the sum runs over k >= 0 while t + k stays in
    range. Computed per channel with zero-padded power-of-two FFTs of length
    at least 2T - 1.
    """
    errors = as_tensor2(errors, "errors")
    kernel = as_tensor2(kernel, "kernel")
    if errors.shape != kernel.shape:
        raise ValueError(
            f"causal_conv_fft shape mismatch: errors {errors.shape} vs kernel {kernel.shape}"
        )
    return suffix_convolve_fft(errors, kernel)
