"""Temporal-gradient engines: exact reverse-time recursion, diagonal stationary
feedback in three equivalent realizations, and the fully truncated variant.

All engines share one contract: given the per-step error signals e_t (the
same-time-step gradient reaching a layer's state), produce the hidden-state
gradients g_t that fold in future steps. The exact engine threads g through
the true step Jacobians; the stationary-feedback engines replace every
Jacobian by one fixed diagonal matrix, which turns the backward pass into a
linear time-invariant recurrence solvable sequentially, by parallel scan, or
as an FFT convolution. The truncated engine drops the time coupling entirely.

Error and gradient sequences are float64 arrays with time on axis 0, either
(T, width) or (T, batch, width). Every engine guarantees g[T-1] == e[T-1]
bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import cells
from .cells import CellKind, CellParams, StepCache
from .numerics import scan_inclusive_arrays, suffix_convolve_fft


class EngineKind(Enum):
    BPTT = "BPTT"
    DSF_SEQUENTIAL = "DSF_Sequential"
    DSF_SCAN = "DSF_Scan"
    DSF_FFT = "DSF_FFT"
    FTBPTT = "FTBPTT"

    @classmethod
    def parse(cls, name: str) -> "EngineKind":
        for kind in cls:
            if kind.value == name:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown engine {name!r}; expected one of {valid}")

    @property
    def is_dsf(self) -> bool:
        return self in (EngineKind.DSF_SEQUENTIAL, EngineKind.DSF_SCAN, EngineKind.DSF_FFT)


DSF_BACKENDS = (EngineKind.DSF_SEQUENTIAL, EngineKind.DSF_SCAN, EngineKind.DSF_FFT)


@dataclass
class FeedbackMatrix:
    """diag of the fixed feedback matrix; one per recurrent layer.

    Entries are drawn once at model initialization and never trained. The
    convolution kernel is memoized per sequence length since training reuses
    one length throughout.
    """

    a: np.ndarray
    _kernels: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 1:
            raise ValueError(f"feedback diagonal must be 1-D, got shape {self.a.shape}")

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def clamp(self) -> None:
        # Entries outside [0, 1] would make long-horizon kernels explode.
        np.clip(self.a, 0.0, 1.0, out=self.a)

    def kernel(self, length: int) -> np.ndarray:
        got = self._kernels.get(length)
        if got is None:
            got = dsf_kernel(self.a, length)
            self._kernels[length] = got
        return got


def init_feedback(width: int, rng: np.random.Generator) -> FeedbackMatrix:
    """Uniform [0, 1) entries, the stationary stand-in for the step Jacobians."""
    return FeedbackMatrix(a=rng.uniform(0.0, 1.0, width))


def dsf_kernel(a, length: int) -> np.ndarray:
    """Elementwise powers (1, a, a^2, ..., a^(length-1)), shape (length, d)."""
    if isinstance(a, FeedbackMatrix):
        return a.kernel(length)
    a = np.asarray(a, dtype=np.float64)
    if length < 1:
        raise ValueError(f"kernel length must be >= 1, got {length}")
    out = np.ones((length, a.shape[0]))
    if length > 1:
        np.cumprod(np.broadcast_to(a, (length - 1, a.shape[0])), axis=0, out=out[1:])
    return out


def _as_error_array(errors, name: str = "errors") -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim not in (2, 3) or e.shape[0] < 1:
        raise ValueError(f"{name} must be (T, width) or (T, batch, width), got {e.shape}")
    return e


def _feedback_vector(a, width: int) -> np.ndarray:
    vec = a.a if isinstance(a, FeedbackMatrix) else np.asarray(a, dtype=np.float64)
    if vec.shape != (width,):
        raise ValueError(
            f"feedback diagonal has shape {vec.shape}, errors have width {width}"
        )
    return vec


def bptt_hidden_grads(errors, caches: list[StepCache], params: CellParams,
                      kind: CellKind) -> np.ndarray:
    """Exact reverse-time recursion g[t] = e[t] + g[t+1] . J[t+1].

    J[t+1] is the Jacobian of state t+1 with respect to state t, evaluated
    through the cache of the step that produced state t+1. Strictly
    sequential: each g[t] needs g[t+1] first.
    """
    e = _as_error_array(errors)
    steps = e.shape[0]
    if len(caches) != steps:
        raise ValueError(f"{len(caches)} caches for {steps} error steps")
    g = np.empty_like(e)
    g[-1] = e[-1]
    squeeze = e.ndim == 2
    for t in range(steps - 2, -1, -1):
        carried = g[t + 1][None, :] if squeeze else g[t + 1]
        pulled = cells.cell_vjp_hidden(kind, params, caches[t + 1], carried)
        g[t] = e[t] + (pulled[0] if squeeze else pulled)
    return g


def ft_bptt_hidden_grads(errors) -> np.ndarray:
    """Fully truncated variant: the time coupling is dropped, g == e."""
    return _as_error_array(errors).copy()


def dsf_hidden_grads(errors, a, backend: EngineKind) -> np.ndarray:
    """Stationary-feedback gradients g[t] = sum_{k>=t} a^(k-t) * e[k].

    The three backends realize the same sum: Sequential runs the reverse
    recursion step by step; Scan evaluates it as a first-order linear
    recurrence with a log-depth associative sweep; FFT convolves the error
    sequence with the power kernel. Results agree to tight absolute
    tolerance and the terminal row is copied bitwise.
    """
    if backend not in DSF_BACKENDS:
        raise ValueError(f"not a stationary-feedback backend: {backend}")
    e = _as_error_array(errors)
    vec = _feedback_vector(a, e.shape[-1])
    steps = e.shape[0]

    if backend is EngineKind.DSF_SEQUENTIAL:
        g = np.empty_like(e)
        g[-1] = e[-1]
        for t in range(steps - 2, -1, -1):
            g[t] = e[t] + vec * g[t + 1]
        return g

    if backend is EngineKind.DSF_SCAN:
        rev = e[::-1]
        mult_shape = (steps,) + (1,) * (e.ndim - 2) + (e.shape[-1],)
        mult = np.broadcast_to(vec, mult_shape)
        return scan_inclusive_arrays(mult, rev)[::-1].copy()

    kernel = dsf_kernel(a, steps)
    if e.ndim == 2:
        g = suffix_convolve_fft(e, kernel)
    else:
        batch = e.shape[1]
        flat = e.reshape(steps, batch * e.shape[-1])
        tiled = np.tile(kernel, (1, batch))
        g = suffix_convolve_fft(flat, tiled).reshape(e.shape)
    # The convolution terminal row carries FFT roundoff; the recursion's
    # boundary condition is exact, so enforce it.
    g[-1] = e[-1]
    return g


def hidden_grads(engine: EngineKind, errors, caches=None, params=None,
                 kind: CellKind = None, feedback: FeedbackMatrix = None) -> np.ndarray:
    """Uniform entry point: route the error sequence through one engine."""
    if engine is EngineKind.BPTT:
        if caches is None or params is None or kind is None:
            raise ValueError("exact engine needs caches, params, and cell kind")
        return bptt_hidden_grads(errors, caches, params, kind)
    if engine is EngineKind.FTBPTT:
        return ft_bptt_hidden_grads(errors)
    if feedback is None:
        raise ValueError("stationary-feedback engines need a feedback diagonal")
    return dsf_hidden_grads(errors, feedback, engine)


def accumulate_param_grads(grads, caches: list[StepCache], params: CellParams,
                           kind: CellKind, out: CellParams) -> None:
    """out += sum over t of the per-step parameter VJP driven by g[t].

    Steps are independent; accumulation runs in fixed time order so the
    result is deterministic.
    """
    g = _as_error_array(grads, "grads")
    steps = g.shape[0]
    if len(caches) != steps:
        raise ValueError(f"{len(caches)} caches for {steps} gradient steps")
    squeeze = g.ndim == 2
    for t in range(steps):
        row = g[t][None, :] if squeeze else g[t]
        cells.cell_vjp_params(kind, params, caches[t], row, out)
