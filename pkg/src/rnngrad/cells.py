"""Recurrent cell forward passes and hand-derived vector-Jacobian products.

Three cell kinds: a tanh Elman cell, a GRU, and an LSTM whose per-step output
is the concatenation [c_t ; h_t] of width 2d. Activations are computed with
batch-first arrays: inputs (B, d_in), states (B, d). Weight matrices are
stored (out_dim, in_dim), so a pre-activation is x @ W.T + h_prev @ U.T + b.

Every backward helper consumes a StepCache written by cell_forward; caches
hold post-activations, which is enough to evaluate all partial derivatives
without re-running the step.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from typing import Iterator, Optional, Union

import numpy as np

from .numerics import gemm


class CellKind(Enum):
    VANILLA_RNN = "VanillaRNN"
    GRU = "GRU"
    LSTM = "LSTM"

    @classmethod
    def parse(cls, name: str) -> "CellKind":
        for kind in cls:
            if kind.value == name:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown cell kind {name!r}; expected one of {valid}")


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class VanillaParams:
    w_in: np.ndarray    # (d, d_in)
    u_rec: np.ndarray   # (d, d)
    bias: np.ndarray    # (d,)


@dataclass
class GruParams:
    w_update: np.ndarray
    u_update: np.ndarray
    b_update: np.ndarray
    w_reset: np.ndarray
    u_reset: np.ndarray
    b_reset: np.ndarray
    w_cand: np.ndarray
    u_cand: np.ndarray
    b_cand: np.ndarray


@dataclass
class LstmParams:
    w_input: np.ndarray
    u_input: np.ndarray
    b_input: np.ndarray
    w_forget: np.ndarray
    u_forget: np.ndarray
    b_forget: np.ndarray
    w_output: np.ndarray
    u_output: np.ndarray
    b_output: np.ndarray
    w_cell: np.ndarray
    u_cell: np.ndarray
    b_cell: np.ndarray


CellParams = Union[VanillaParams, GruParams, LstmParams]

_PARAMS_TYPE = {
    CellKind.VANILLA_RNN: VanillaParams,
    CellKind.GRU: GruParams,
    CellKind.LSTM: LstmParams,
}


def named_arrays(obj) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (field_name, array) pairs in declaration order."""
    for f in fields(obj):
        arr = getattr(obj, f.name)
        if arr is not None:
            yield f.name, arr


def zeros_like_params(params):
    """Same container type with every array zeroed; the gradient accumulator."""
    cls = type(params)
    return cls(**{f.name: np.zeros_like(getattr(params, f.name)) for f in fields(cls)})


def init_cell_params(kind: CellKind, d: int, d_in: int, rng: np.random.Generator) -> CellParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, forget bias +1.

    Draws happen in field declaration order so a fixed seed fixes every
    tensor bit-for-bit.
    """
    cls = _PARAMS_TYPE[kind]
    out = {}
    for f in fields(cls):
        if f.name.startswith("w_"):
            bound = 1.0 / np.sqrt(d_in)
            out[f.name] = rng.uniform(-bound, bound, (d, d_in))
        elif f.name.startswith("u_"):
            bound = 1.0 / np.sqrt(d)
            out[f.name] = rng.uniform(-bound, bound, (d, d))
        else:
            out[f.name] = np.zeros(d)
    if kind is CellKind.LSTM:
        out["b_forget"] = np.ones(d)
    return cls(**out)


def cell_dims(params: CellParams) -> tuple[int, int]:
    """(d, d_in) read off the first input-side weight matrix."""
    first = next(iter(named_arrays(params)))[1]
    return first.shape[0], first.shape[1]


def state_width(kind: CellKind, d: int) -> int:
    """Width of the per-step output and of the temporal gradient: 2d for LSTM."""
    return 2 * d if kind is CellKind.LSTM else d


# ---------------------------------------------------------------------------
# state and caches

@dataclass
class CellState:
    h: np.ndarray
    c: Optional[np.ndarray] = None


def zero_state(kind: CellKind, batch: int, d: int) -> CellState:
    h = np.zeros((batch, d))
    c = np.zeros((batch, d)) if kind is CellKind.LSTM else None
    return CellState(h=h, c=c)


@dataclass
class VanillaCache:
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    update: np.ndarray   # z gate, post sigmoid
    reset: np.ndarray    # r gate, post sigmoid
    cand: np.ndarray     # candidate, post tanh
    gated: np.ndarray    # reset * h_prev, the candidate's recurrent input


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gate_in: np.ndarray
    gate_forget: np.ndarray
    gate_out: np.ndarray
    cand: np.ndarray
    tanh_c: np.ndarray


StepCache = Union[VanillaCache, GruCache, LstmCache]

_CACHE_TYPE = {
    CellKind.VANILLA_RNN: VanillaCache,
    CellKind.GRU: GruCache,
    CellKind.LSTM: LstmCache,
}

# Incremented by every cell_vjp_hidden call; the complexity claims for the
# approximate engines hinge on this staying flat, so it is observable.
_hidden_vjp_calls = 0


def hidden_vjp_call_count() -> int:
    return _hidden_vjp_calls


def reset_hidden_vjp_calls() -> None:
    global _hidden_vjp_calls
    _hidden_vjp_calls = 0


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_kinds(kind: CellKind, params: CellParams, cache: StepCache = None):
    if not isinstance(params, _PARAMS_TYPE[kind]):
        raise ValueError(
            f"params type {type(params).__name__} does not match cell kind {kind.value}"
        )
    if cache is not None and not isinstance(cache, _CACHE_TYPE[kind]):
        raise ValueError(
            f"cache type {type(cache).__name__} does not match cell kind {kind.value}"
        )


# ---------------------------------------------------------------------------
# forward

def cell_forward(kind: CellKind, params: CellParams, x: np.ndarray,
                 state_prev: CellState) -> tuple[CellState, np.ndarray, StepCache]:
    """One recurrence step.

    Returns the new state, the per-step output consumed by upper layers
    (equal to h for the Elman cell and GRU, the concatenation [c ; h] for
    the LSTM), and a cache for the backward helpers.
    """
    _check_kinds(kind, params)
    d, d_in = cell_dims(params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ValueError(f"input has shape {x.shape}, expected (batch, {d_in})")
    h_prev = state_prev.h
    if h_prev.shape != (x.shape[0], d):
        raise ValueError(f"state has shape {h_prev.shape}, expected ({x.shape[0]}, {d})")

    if kind is CellKind.VANILLA_RNN:
        pre = gemm(x, params.w_in, transpose_b=True)
        pre += gemm(h_prev, params.u_rec, transpose_b=True)
        pre += params.bias
        h = np.tanh(pre)
        return CellState(h=h), h, VanillaCache(x=x, h_prev=h_prev, h=h)

    if kind is CellKind.GRU:
        z = _sigmoid(gemm(x, params.w_update, transpose_b=True)
                     + gemm(h_prev, params.u_update, transpose_b=True) + params.b_update)
        r = _sigmoid(gemm(x, params.w_reset, transpose_b=True)
                     + gemm(h_prev, params.u_reset, transpose_b=True) + params.b_reset)
        gated = r * h_prev
        n = np.tanh(gemm(x, params.w_cand, transpose_b=True)
                    + gemm(gated, params.u_cand, transpose_b=True) + params.b_cand)
        h = (1.0 - z) * h_prev + z * n
        cache = GruCache(x=x, h_prev=h_prev, update=z, reset=r, cand=n, gated=gated)
        return CellState(h=h), h, cache

    # LSTM
    c_prev = state_prev.c
    if c_prev is None:
        raise ValueError("LSTM step needs a cell state c in state_prev")
    i = _sigmoid(gemm(x, params.w_input, transpose_b=True)
                 + gemm(h_prev, params.u_input, transpose_b=True) + params.b_input)
    f = _sigmoid(gemm(x, params.w_forget, transpose_b=True)
                 + gemm(h_prev, params.u_forget, transpose_b=True) + params.b_forget)
    o = _sigmoid(gemm(x, params.w_output, transpose_b=True)
                 + gemm(h_prev, params.u_output, transpose_b=True) + params.b_output)
    n = np.tanh(gemm(x, params.w_cell, transpose_b=True)
                + gemm(h_prev, params.u_cell, transpose_b=True) + params.b_cell)
    c = f * c_prev + i * n
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = LstmCache(x=x, h_prev=h_prev, c_prev=c_prev, gate_in=i,
                      gate_forget=f, gate_out=o, cand=n, tanh_c=tanh_c)
    output = np.concatenate([c, h], axis=1)
    return CellState(h=h, c=c), output, cache


# ---------------------------------------------------------------------------
# backward helpers
#
# Each takes the incoming gradient g with respect to the step's output/state
# vector (width d, or 2d for LSTM as [dc ; dh]) and pushes it through one of
# the three dependency paths: previous state, parameters, or input.

def _gru_gate_pre_grads(cache: GruCache, g: np.ndarray, params: GruParams):
    """Shared gate pre-activation gradients for the GRU backward paths."""
    z, r, n, h_prev = cache.update, cache.reset, cache.cand, cache.h_prev
    dz = g * (n - h_prev)
    dn_pre = (g * z) * (1.0 - n * n)
    dgated = gemm(dn_pre, params.u_cand)
    dr = dgated * h_prev
    dz_pre = dz * z * (1.0 - z)
    dr_pre = dr * r * (1.0 - r)
    return dz_pre, dr_pre, dn_pre, dgated


def _lstm_pre_grads(cache: LstmCache, g: np.ndarray):
    d = cache.h_prev.shape[1]
    gc, gh = g[:, :d], g[:, d:]
    i, f, o, n = cache.gate_in, cache.gate_forget, cache.gate_out, cache.cand
    dc = gc + gh * o * (1.0 - cache.tanh_c * cache.tanh_c)
    do = gh * cache.tanh_c
    di_pre = (dc * n) * i * (1.0 - i)
    df_pre = (dc * cache.c_prev) * f * (1.0 - f)
    do_pre = do * o * (1.0 - o)
    dn_pre = (dc * i) * (1.0 - n * n)
    dc_prev = dc * f
    return di_pre, df_pre, do_pre, dn_pre, dc_prev


def cell_vjp_hidden(kind: CellKind, params: CellParams, cache: StepCache,
                    g: np.ndarray) -> np.ndarray:
    """g times the Jacobian of the step's state with respect to the previous state.

    For the LSTM both g and the result have width 2d, covering [c ; h].
    """
    global _hidden_vjp_calls
    _hidden_vjp_calls += 1
    _check_kinds(kind, params, cache)

    if kind is CellKind.VANILLA_RNN:
        dpre = g * (1.0 - cache.h * cache.h)
        return gemm(dpre, params.u_rec)

    if kind is CellKind.GRU:
        z, r = cache.update, cache.reset
        dz_pre, dr_pre, dn_pre, dgated = _gru_gate_pre_grads(cache, g, params)
        dh_prev = g * (1.0 - z) + dgated * r
        dh_prev += gemm(dz_pre, params.u_update)
        dh_prev += gemm(dr_pre, params.u_reset)
        return dh_prev

    di_pre, df_pre, do_pre, dn_pre, dc_prev = _lstm_pre_grads(cache, g)
    dh_prev = gemm(di_pre, params.u_input)
    dh_prev += gemm(df_pre, params.u_forget)
    dh_prev += gemm(do_pre, params.u_output)
    dh_prev += gemm(dn_pre, params.u_cell)
    return np.concatenate([dc_prev, dh_prev], axis=1)


def cell_vjp_params(kind: CellKind, params: CellParams, cache: StepCache,
                    g: np.ndarray, out: CellParams) -> None:
    """Accumulate g times the state's Jacobian with respect to each parameter.

    The previous state and the input are treated as constants; `out` mirrors
    the parameter container and is modified in place.
    """
    _check_kinds(kind, params, cache)
    if type(out) is not type(params):
        raise ValueError(
            f"gradient accumulator type {type(out).__name__} does not match params"
        )

    if kind is CellKind.VANILLA_RNN:
        dpre = g * (1.0 - cache.h * cache.h)
        out.w_in += gemm(dpre, cache.x, transpose_a=True)
        out.u_rec += gemm(dpre, cache.h_prev, transpose_a=True)
        out.bias += dpre.sum(axis=0)
        return

    if kind is CellKind.GRU:
        dz_pre, dr_pre, dn_pre, _ = _gru_gate_pre_grads(cache, g, params)
        out.w_update += gemm(dz_pre, cache.x, transpose_a=True)
        out.u_update += gemm(dz_pre, cache.h_prev, transpose_a=True)
        out.b_update += dz_pre.sum(axis=0)
        out.w_reset += gemm(dr_pre, cache.x, transpose_a=True)
        out.u_reset += gemm(dr_pre, cache.h_prev, transpose_a=True)
        out.b_reset += dr_pre.sum(axis=0)
        out.w_cand += gemm(dn_pre, cache.x, transpose_a=True)
        out.u_cand += gemm(dn_pre, cache.gated, transpose_a=True)
        out.b_cand += dn_pre.sum(axis=0)
        return

    di_pre, df_pre, do_pre, dn_pre, _ = _lstm_pre_grads(cache, g)
    for pre, w_name, u_name, b_name in (
        (di_pre, "w_input", "u_input", "b_input"),
        (df_pre, "w_forget", "u_forget", "b_forget"),
        (do_pre, "w_output", "u_output", "b_output"),
        (dn_pre, "w_cell", "u_cell", "b_cell"),
    ):
        getattr(out, w_name).__iadd__(gemm(pre, cache.x, transpose_a=True))
        getattr(out, u_name).__iadd__(gemm(pre, cache.h_prev, transpose_a=True))
        getattr(out, b_name).__iadd__(pre.sum(axis=0))


def cell_vjp_input(kind: CellKind, params: CellParams, cache: StepCache,
                   g: np.ndarray) -> np.ndarray:
    """g times the state's Jacobian with respect to the step input x."""
    _check_kinds(kind, params, cache)

    if kind is CellKind.VANILLA_RNN:
        dpre = g * (1.0 - cache.h * cache.h)
        return gemm(dpre, params.w_in)

    if kind is CellKind.GRU:
        dz_pre, dr_pre, dn_pre, _ = _gru_gate_pre_grads(cache, g, params)
        dx = gemm(dz_pre, params.w_update)
        dx += gemm(dr_pre, params.w_reset)
        dx += gemm(dn_pre, params.w_cand)
        return dx

    di_pre, df_pre, do_pre, dn_pre, _ = _lstm_pre_grads(cache, g)
    dx = gemm(di_pre, params.w_input)
    dx += gemm(df_pre, params.w_forget)
    dx += gemm(do_pre, params.w_output)
    dx += gemm(dn_pre, params.w_cell)
    return dx
