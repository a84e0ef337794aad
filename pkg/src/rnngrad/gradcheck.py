"""Independent oracles for the gradient engines.

Three families of checks live here: central finite differences against the
analytic backward pass, a linear diagonal cell on which the stationary
feedback recursion is provably exact, and pairwise agreement between the
stationary-feedback backends.  Every check is seeded and returns a report
that pinpoints the worst tensor and entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as model_mod
from .feedback import DSF_BACKENDS, EngineKind, dsf_hidden_grads
from .numerics import Tensor2, gemm

# Denominator floor so dead units do not divide by zero.
REL_FLOOR = 1e-12

FD_TOLERANCE = 1e-5
BACKEND_TOLERANCE = 1e-10
EXACTNESS_TOLERANCE = 1e-12


def max_rel_err(test: np.ndarray, oracle: np.ndarray) -> float:
    """Largest absolute deviation scaled by the larger max norm.

    Scaling per tensor rather than per entry keeps near-zero entries inside
    an otherwise healthy tensor from turning difference-quotient noise into
    spurious relative blowups.
    """
    return _tensor_gap(test, oracle)[0]


def _tensor_gap(test: np.ndarray, oracle: np.ndarray):
    diff = np.abs(test - oracle)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    scale = max(float(np.abs(test).max()), float(np.abs(oracle).max()),
                REL_FLOOR)
    rel = float(diff[idx]) / scale
    return rel, tuple(int(i) for i in idx), float(test[idx]), float(oracle[idx])


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass
class CheckReport:
    """Outcome of one oracle check.

    The pass flag is derived, never stored, so it cannot drift out of sync
    with the measured error.
    """

    check: str
    tolerance: float
    max_err: float
    metric: str = "relative"
    worst_tensor: str = ""
    worst_index: tuple = ()
    test_value: float = 0.0
    oracle_value: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tolerance

    def summary(self) -> str:
        """One machine-readable line for CI logs."""
        payload = {
            "check": self.check,
            "pass": self.passed,
            "metric": self.metric,
            "max_err": self.max_err,
            "tolerance": self.tolerance,
            "worst_tensor": self.worst_tensor,
            "worst_index": list(self.worst_index),
            "test_value": self.test_value,
            "oracle_value": self.oracle_value,
        }
        payload.update(self.details)
        return json.dumps(_plain(payload))

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"[{status}] {self.check}: max {self.metric} error "
            f"{self.max_err:.3e} (tolerance {self.tolerance:.1e})",
        ]
        if self.worst_tensor:
            lines.append(
                f"  worst at {self.worst_tensor}{list(self.worst_index)}: "
                f"test {self.test_value:.9e} vs oracle {self.oracle_value:.9e}"
            )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grads(loss_fn: Callable[[], float],
                      arrays: Sequence[np.ndarray],
                      eps: float) -> list[np.ndarray]:
    """Central differences of loss_fn over every scalar in arrays.

    loss_fn reads the arrays in place, so perturbations are written and
    reverted entry by entry.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            plus = loss_fn()
            flat[i] = saved - eps
            minus = loss_fn()
            flat[i] = saved
            gflat[i] = (plus - minus) / (2.0 * eps)
        grads.append(g)
    return grads


def finite_diff_loss_grad(params: model_mod.ModelParams,
                          tokens: np.ndarray,
                          targets: np.ndarray,
                          eps: float = 1e-4) -> model_mod.ParamGrads:
    """Finite-difference gradient of the mean loss over a batch.

    Refuses to run if two baseline evaluations disagree, since central
    differences are meaningless on a non-deterministic forward pass.
    """

    def loss_fn() -> float:
        logits, _ = model_mod.forward(params, tokens)
        loss, _ = model_mod.loss_and_errors(logits, targets)
        return loss

    if loss_fn() != loss_fn():
        raise RuntimeError("non-deterministic forward: two baseline "
                           "evaluations of the unperturbed loss differ")

    arrays = [a for _, a in params.named_trainable()]
    grads = params.zeros_grads()
    fd = finite_diff_grads(loss_fn, arrays, eps)
    for (_, garr), g in zip(grads.named_trainable(), fd):
        garr[:] = g
    return grads


def check_model_grads(params: model_mod.ModelParams,
                      tokens: np.ndarray,
                      targets: np.ndarray,
                      engine: EngineKind = EngineKind.BPTT,
                      eps: float = 1e-4,
                      tolerance: float = FD_TOLERANCE) -> CheckReport:
    """Compare the analytic backward pass against finite differences.

    eps defaults to 1e-4: central-difference truncation shrinks as eps^2
    while evaluation roundoff grows as 1/eps, and 1e-4 keeps both about an
    order of magnitude under the 1e-5 gate for float64 losses.
    """
    logits, trace = model_mod.forward(params, tokens)
    loss, dlogits = model_mod.loss_and_errors(logits, targets)
    analytic = model_mod.backward(params, trace, dlogits, engine)
    oracle = finite_diff_loss_grad(params, tokens, targets, eps)

    worst = CheckReport(check="model_grads", tolerance=tolerance, max_err=0.0,
                        details={"engine": engine.value, "eps": eps,
                                 "loss": loss})
    fd_by_name = dict(oracle.named_trainable())
    for name, got in analytic.named_trainable():
        err, idx, tv, ov = _tensor_gap(got, fd_by_name[name])
        if err >= worst.max_err:
            worst.max_err = err
            worst.worst_tensor = name
            worst.worst_index = idx
            worst.test_value = tv
            worst.oracle_value = ov
    return worst


def check_fd_convergence(params: model_mod.ModelParams,
                         tokens: np.ndarray,
                         targets: np.ndarray,
                         eps_coarse: float = 1e-4,
                         eps_fine: float = 1e-5,
                         tolerance: float = FD_TOLERANCE) -> CheckReport:
    """Cross-check two step sizes against each other.

    On a smooth loss the truncation term is quadratic in eps, so estimates
    at 1e-4 and 1e-5 must agree to well under the finite-difference gate;
    disagreement means one of the step sizes sits in a bad regime.
    """
    coarse = finite_diff_loss_grad(params, tokens, targets, eps_coarse)
    fine = finite_diff_loss_grad(params, tokens, targets, eps_fine)
    report = CheckReport(check="fd_convergence", tolerance=tolerance,
                         max_err=0.0,
                         details={"eps_coarse": eps_coarse,
                                  "eps_fine": eps_fine})
    fine_by_name = dict(fine.named_trainable())
    for name, got in coarse.named_trainable():
        err, idx, tv, ov = _tensor_gap(got, fine_by_name[name])
        if err >= report.max_err:
            report.max_err = err
            report.worst_tensor = name
            report.worst_index = idx
            report.test_value = tv
            report.oracle_value = ov
    return report


# ---------------------------------------------------------------------------
# linear diagonal cell


@dataclass
class LinearDiagCell:
    """State update h_t = a * h_prev + x_t.

    Its hidden-to-hidden Jacobian is diag(a) at every step, so the
    stationary-feedback recursion reproduces exact backpropagation on it
    with no approximation at all.
    """

    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 1:
            raise ValueError("diagonal must be a 1-D vector")

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def forward(self, inputs: Tensor2, h0: np.ndarray | None = None) -> Tensor2:
        steps, dim = inputs.shape
        if dim != self.dim:
            raise ValueError(f"input width {dim} does not match cell width {self.dim}")
        h = np.zeros(dim) if h0 is None else np.asarray(h0, dtype=np.float64)
        out = np.empty_like(inputs)
        for t in range(steps):
            h = self.a * h + inputs[t]
            out[t] = h
        return out

    def jacobian(self) -> Tensor2:
        return np.diag(self.a)


def bptt_reference_linear(cell: LinearDiagCell, errors: Tensor2) -> Tensor2:
    """Exact reverse-time recursion through the dense step Jacobian.

    Deliberately routed through a full matrix product rather than an
    elementwise multiply, so it shares no code path with the engines under
    test.
    """
    steps = errors.shape[0]
    jac = cell.jacobian()
    grads = np.empty_like(errors)
    grads[steps - 1] = errors[steps - 1]
    for t in range(steps - 2, -1, -1):
        grads[t] = errors[t] + gemm(grads[t + 1][None, :], jac)[0]
    return grads


def check_dsf_exactness(d: int, steps: int, seed: int,
                        perturb: bool = False,
                        tolerance: float = EXACTNESS_TOLERANCE) -> CheckReport:
    """Verify the stationary engines are exact on the linear diagonal cell.

    With perturb=True the diagonal handed to the engines is deliberately
    shifted in one entry, which must make the check fail; it is the
    negative control proving the comparison has teeth.
    """
    if perturb and steps < 2:
        raise ValueError("negative control needs at least two steps")
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, size=d)
    errors = rng.standard_normal((steps, d))
    oracle = bptt_reference_linear(LinearDiagCell(a), errors)

    a_used = a.copy()
    if perturb:
        a_used[0] += 0.1

    report = CheckReport(check="dsf_exactness", tolerance=tolerance,
                         max_err=0.0,
                         details={"d": d, "steps": steps, "seed": seed,
                                  "perturbed": perturb})
    for backend in DSF_BACKENDS:
        got = dsf_hidden_grads(errors, a_used, backend)
        err, idx, tv, ov = _tensor_gap(got, oracle)
        if err >= report.max_err:
            report.max_err = err
            report.worst_tensor = f"g({backend.value})"
            report.worst_index = idx
            report.test_value = tv
            report.oracle_value = ov
    return report


# ---------------------------------------------------------------------------
# backend agreement


def check_engine_consistency(dims: Sequence[int],
                             lengths: Sequence[int],
                             trials: int,
                             seed: int,
                             tolerance: float = BACKEND_TOLERANCE) -> CheckReport:
    """All stationary backends must produce the same grids of numbers.

    Draws random (d, T) pairs from the given lists and compares the
    backends pairwise in absolute terms; the sweep includes whatever odd
    lengths the caller supplies, which is how the transform padding gets
    exercised.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    report = CheckReport(check="engine_consistency", tolerance=tolerance,
                         max_err=0.0, metric="absolute",
                         details={"trials": trials, "seed": seed,
                                  "dims": list(dims),
                                  "lengths": list(lengths)})
    for _ in range(trials):
        d = int(rng.choice(np.asarray(dims)))
        steps = int(rng.choice(np.asarray(lengths)))
        a = rng.uniform(0.0, 1.0, size=d)
        errors = rng.standard_normal((steps, d))
        outs = {b: dsf_hidden_grads(errors, a, b) for b in DSF_BACKENDS}
        backends = list(outs)
        for i, first in enumerate(backends):
            for second in backends[i + 1:]:
                diff = np.abs(outs[first] - outs[second])
                idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
                err = float(diff[idx])
                if err >= report.max_err:
                    report.max_err = err
                    report.worst_tensor = (f"g({first.value}) vs "
                                           f"g({second.value}) d={d} T={steps}")
                    report.worst_index = tuple(int(i) for i in idx)
                    report.test_value = float(outs[first][idx])
                    report.oracle_value = float(outs[second][idx])
    return report
