"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor, no_grad, trace_kinks


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_tol: float
    per_input: list[float] = field(default_factory=list)
    n_checked: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.rel_tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.rel_tol:g}, {self.n_checked} elements, "
                f"{self.n_skipped} skipped at ReLU kinks)")


def _crosses(perturbed: list, reference: list, tol: float) -> bool:
    """True if some ReLU input changes sign by more than ``tol`` between the two traces.

    Sign flips where both values are within ``tol`` of zero (rounding noise
    around an input that is identically zero) cannot bias the quotient.
    """
    if len(perturbed) != len(reference):
        return True
    for p, r in zip(perturbed, reference):
        flipped = (p > 0) != (r > 0)
        if np.any(flipped & (np.maximum(np.abs(p), np.abs(r)) > tol)):
            return True
    return False


def numerical_grad(f: Callable[[], DiffTensor], x: DiffTensor, h: float = 1e-3, indices=None,
                   reference: list | None = None, straddled: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data``, read back in f64.

    With ``reference`` (the ReLU inputs of ``f()`` at the unperturbed point)
    and a boolean ``straddled`` array of x's shape, coordinates whose stencil
    moves any ReLU input across zero are flagged there.
    """
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size, dtype=np.float64)
    flags = None if straddled is None else straddled.reshape(-1)
    tol = 1e-6 * h
    with no_grad():
        for i in idx:
            orig = flat[i]
            with trace_kinks() as hi_masks:
                flat[i] = orig + h
                hi = np.float64(f().item())
            with trace_kinks() as lo_masks:
                flat[i] = orig - h
                lo = np.float64(f().item())
            flat[i] = orig
            if flags is not None and reference is not None:
                flags[i] = _crosses(hi_masks, reference, tol) or _crosses(lo_masks, reference, tol)
            # divide by the perturbation actually representable in storage
            step = np.float64(np.asarray(orig + h, flat.dtype)) - np.float64(np.asarray(orig - h, flat.dtype))
            out[i] = (hi - lo) / step
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is 1% of ``scale`` (default: the largest numeric gradient
    magnitude) and at least 1e-6, so components that are essentially zero
    relative to the rest of the gradient are compared on the gradient's own
    scale rather than amplifying finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = float(np.max(np.abs(n))) if n.size else 0.0
    floor = max(1e-6, 1e-2 * scale)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    f: Callable[..., DiffTensor],
    inputs: Sequence[DiffTensor],
    rel_tol: float = 1e-2,
    h: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    accumulate=np.float64,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` against central differences.

    During the check each input's storage is promoted to ``accumulate``
    (values unchanged, they are the f32 numbers) so every op downstream of it
    accumulates in that precision; storage is restored afterwards.
    ``max_elements`` limits how many coordinates per input are probed (drawn
    with ``rng``); by default every coordinate is checked.
    """
    saved = [(x.data, x.requires_grad, x.grad) for x in inputs]
    try:
        for x in inputs:
            if accumulate is not None:
                x.data = x.data.astype(accumulate)
            x.requires_grad = True
            x.grad = None
        return _check(f, inputs, rel_tol, h, max_elements, rng)
    finally:
        for x, (data, req, grad) in zip(inputs, saved):
            x.data, x.requires_grad, x.grad = data, req, grad


def _check(f, inputs, rel_tol, h, max_elements, rng) -> GradCheckReport:
    with trace_kinks() as reference:
        out = f(*inputs)
    out.backward()
    analytic = [x.grad.copy() if x.grad is not None else np.zeros(x.shape, x.dtype) for x in inputs]

    pairs, skipped = [], 0
    for x, a in zip(inputs, analytic):
        indices = None
        if max_elements is not None and x.size > max_elements:
            rng = rng or np.random.default_rng(0)
            indices = np.sort(rng.choice(x.size, size=max_elements, replace=False))
        straddled = np.zeros(x.shape, dtype=bool)
        n = numerical_grad(lambda: f(*inputs), x, h, indices, reference, straddled)
        a, n, straddled = a.reshape(-1), n.reshape(-1), straddled.reshape(-1)
        if indices is not None:
            a, n, straddled = a[indices], n[indices], straddled[indices]
        # a stencil across a ReLU kink measures a chord, not the derivative
        keep = ~straddled
        skipped += int(straddled.sum())
        pairs.append((a[keep], n[keep]))
    # one floor for the whole check: an input whose true gradient is zero
    # (e.g. a bias feeding batch norm) is judged on the function's scale
    scale = max((float(np.max(np.abs(n))) for _, n in pairs if n.size), default=0.0)
    errors, count = [], 0
    for a, n in pairs:
        err = relative_error(a, n, scale)
        errors.append(float(err.max()) if err.size else 0.0)
        count += err.size
    return GradCheckReport(max(errors, default=0.0), rel_tol, errors, count, skipped)
