"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ops import record_branches
from .tensor import Tensor, backward

DEFAULT_STEP = {32: 1e-3, 64: 1e-6}
ORACLE_DTYPE = np.longdouble


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def numeric_grad(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float, coords=None, skip_kinks: bool = False
):
    """(f(x+h) - f(x-h)) / 2h for each coordinate in ``coords`` (all by default).

    ``f`` is evaluated on an extended-precision copy of ``x`` (``longdouble``;
    plain float64 on platforms without it) so round-off in the difference
    quotient stays far below the gradient being checked.  Constants captured
    by ``f`` promote exactly.

    With ``skip_kinks`` the return value is ``(grad, valid)`` where ``valid``
    is False for coordinates whose +-h stencil changes a relu sign or a
    maxpool argmax, i.e. straddles a point where f is not differentiable.
    """
    probe = Tensor(x.data, dtype=ORACLE_DTYPE)
    flat = probe.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size, dtype=np.float64)
    valid = np.ones(flat.size, dtype=bool)
    base = None
    if skip_kinks:
        with record_branches() as base:
            f(probe)

    def evaluate(i):
        if not skip_kinks:
            return f(probe).data
        with record_branches() as log:
            val = f(probe).data
        if not _same_branches(base, log):
            valid[i] = False
        return val

    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(i)
        flat[i] = orig - h
        fm = evaluate(i)
        flat[i] = orig
        out[i] = float((fp - fm) / (2 * h))
    out = out.reshape(x.shape)
    return (out, valid.reshape(x.shape)) if skip_kinks else out


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.grad = None
    x.requires_grad = True
    backward(f(x))
    g = x.grad
    x.grad = None
    return g


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    norm_rel_error: float = 0.0


def grad_check_report(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float | None = None,
    mask=None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Like :func:`grad_check` but also reports how many coordinates were compared."""
    if h is None:
        h = DEFAULT_STEP[64 if x.dtype == np.float64 else 32]
    coords = None if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
    a = analytic_grad(f, x)
    if skip_kinks:
        n, valid = numeric_grad(f, x, h, coords, skip_kinks=True)
    else:
        n, valid = numeric_grad(f, x, h, coords), np.ones(x.shape, dtype=bool)
    keep = valid.reshape(-1).copy()
    if mask is not None:
        sel = np.zeros_like(keep)
        sel[coords] = True
        keep &= sel
    av = np.asarray(a, dtype=np.float64).reshape(-1)[keep]
    nv = n.reshape(-1)[keep]
    err = relative_error(av, nv)
    skipped = int(keep.size - keep.sum()) if mask is None else int(len(coords) - keep.sum())
    scale = max(float(np.linalg.norm(av)), float(np.linalg.norm(nv)), 1e-8)
    return GradCheckReport(
        float(err.max()) if err.size else 0.0,
        int(err.size),
        skipped,
        float(np.linalg.norm(av - nv)) / scale,
    )


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float | None = None, mask=None) -> float:
    """Max relative error between the autodiff and central-difference gradients.

    ``mask`` (boolean, shaped like ``x``) restricts the comparison to selected
    coordinates, e.g. to stay away from ReLU kinks.
    """
    return grad_check_report(f, x, h, mask).max_rel_error
