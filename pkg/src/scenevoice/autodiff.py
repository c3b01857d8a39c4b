"""Reverse-mode automatic differentiation on a flat operation tape.

Every differentiable op appends one record to a `Tape`; records hold the
output node, the input objects, and a closure producing the input adjoints.
Creation order is a topological order by construction, so `Tape.backward`
walks the records once in reverse and accumulates gradients into `Var.grad`.

Ops accept either `Var` nodes or plain numpy arrays / floats.  When no input
is a `Var` the op runs as ordinary numpy with nothing recorded, which gives a
cheap forward-only path (finite differences, evaluation) through the exact
same code that training differentiates.  Scalars are represented as python
floats, batched values as 2-D arrays.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionMismatch, EmptyTape, ZeroNormVector

NORM_EPS = 1e-12
KL_CLAMP = 1e-12


class Var:
    """One node on the tape: a value and, after backward(), its adjoint."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: "Tape"):
        self.value = value
        self.grad = None
        self.tape = tape

    def __repr__(self):
        return f"Var({self.value!r})"


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self._records: list[tuple[Var, tuple, Callable | None]] = []

    def __len__(self) -> int:
        return len(self._records)

    def leaf(self, value) -> Var:
        """Register a parameter node (no parents)."""
        var = Var(value, self)
        self._records.append((var, (), None))
        return var

    def record(self, value, inputs: Sequence, vjp: Callable) -> Var:
        """Append an op result; `vjp(g)` must return one adjoint per input."""
        var = Var(value, self)
        self._records.append((var, tuple(inputs), vjp))
        return var

    def backward(self, root: Var) -> None:
        """Accumulate d(root)/d(node) into .grad for every node on the tape.

        Visits each record exactly once, newest first.  The root must be a
        scalar node recorded on this tape.
        """
        if not self._records:
            raise EmptyTape("backward() on an empty tape")
        if not isinstance(root, Var) or root.tape is not self:
            raise ValueError("backward root is not a node of this tape")
        if not isinstance(root.value, float):
            raise ValueError("backward root must be a scalar node")
        for var, _, _ in self._records:
            var.grad = None
        root.grad = 1.0
        for var, inputs, vjp in reversed(self._records):
            if var.grad is None or vjp is None:
                continue
            adjoints = vjp(var.grad)
            for inp, adj in zip(inputs, adjoints):
                if adj is None or not isinstance(inp, Var):
                    continue
                if inp.grad is None:
                    inp.grad = adj
                else:
                    inp.grad = inp.grad + adj


def value_of(x):
    """Underlying numpy value (or float) of a Var or passthrough."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("op mixes nodes from two different tapes")
    return tape


def _check_same_shape(a, b):
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb:
        raise DimensionMismatch(f"operand shapes differ: {sa} vs {sb}")


# ---------------------------------------------------------------------------
# generic ops


def add(a, b):
    va, vb = value_of(a), value_of(b)
    _check_same_shape(va, vb)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    _check_same_shape(va, vb)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g, -g))


def scale(a, c: float):
    """Multiply by a non-differentiated constant."""
    va = value_of(a)
    out = va * c
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g * c,))


def matmul(a, b):
    """(B,N) @ (N,D)."""
    va, vb = value_of(a), value_of(b)
    if va.shape[1] != vb.shape[0]:
        raise DimensionMismatch(f"matmul inner dims differ: {va.shape} @ {vb.shape}")
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g @ vb.T, va.T @ g))


def matmul_nt(a, b):
    """(B,D) @ (N,D)^T -> (B,N)."""
    va, vb = value_of(a), value_of(b)
    if va.shape[1] != vb.shape[1]:
        raise DimensionMismatch(f"matmul_nt trailing dims differ: {va.shape} vs {vb.shape}")
    out = va @ vb.T
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g @ vb, g.T @ va))


def gather_rows(x, idx):
    """Select rows of a (B,*) array; adjoint scatter-adds them back."""
    vx = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = vx[idx]
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        dx = np.zeros_like(vx)
        np.add.at(dx, idx, g)
        return (dx,)

    return tape.record(out, (x,), vjp)


def reshape(x, shape):
    vx = value_of(x)
    out = np.reshape(vx, shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (np.reshape(g, np.shape(vx)),))


def sum_all(x):
    """Sum of all entries, as a scalar node."""
    vx = value_of(x)
    out = float(np.sum(vx))
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (np.full_like(vx, g),))


def mean_all(x):
    """Mean of all entries, as a scalar node."""
    vx = value_of(x)
    out = float(np.mean(vx))
    tape = _tape_of(x)
    if tape is None:
        return out
    n = np.size(vx)
    return tape.record(out, (x,), lambda g: (np.full_like(vx, g / n),))


def detach(x):
    """Cut the gradient path: returns the plain value, recording nothing."""
    return value_of(x)


# ---------------------------------------------------------------------------
# similarity / distribution ops


def cosine_matrix(q, m):
    """Pairwise cosine similarities: rows of q (B,D) against rows of m (N,D)."""
    vq, vm = value_of(q), value_of(m)
    if vq.ndim != 2 or vm.ndim != 2 or vq.shape[1] != vm.shape[1]:
        raise DimensionMismatch(f"cosine_matrix needs (B,D) and (N,D); got {vq.shape} and {vm.shape}")
    vq = np.ascontiguousarray(vq)
    vm = np.ascontiguousarray(vm)
    s, qn, mn = kernels.cosine_forward(vq, vm)
    if qn.min(initial=np.inf) <= NORM_EPS or mn.min(initial=np.inf) <= NORM_EPS:
        raise ZeroNormVector(f"cosine similarity against a vector with norm <= {NORM_EPS}")
    tape = _tape_of(q, m)
    if tape is None:
        return s

    def vjp(g):
        g = np.ascontiguousarray(g)
        return kernels.cosine_backward(g, vq, vm, s, qn, mn)

    return tape.record(s, (q, m), vjp)


def softmax_rows(s):
    """Row-wise softmax (max-subtracted, numerically stable)."""
    vs = np.ascontiguousarray(value_of(s))
    w = kernels.softmax_forward(vs)
    tape = _tape_of(s)
    if tape is None:
        return w
    return tape.record(w, (s,), lambda g: (kernels.softmax_backward(np.ascontiguousarray(g), w),))


def kl_rows(p, q):
    """Row-wise KL divergence sum_i p_i ln(p_i / q_i) -> shape (B,).

    Both arguments are clamped at KL_CLAMP inside the log, symmetrically, so
    kl_rows(w, w) is exactly zero even when w has entries below the clamp
    (sharp softmax outputs do).  Terms with p_i = 0 contribute 0.
    """
    vp, vq = value_of(p), value_of(q)
    _check_same_shape(vp, vq)
    pc = np.maximum(vp, KL_CLAMP)
    qc = np.maximum(vq, KL_CLAMP)
    pos = vp > 0.0
    logdiff = np.where(pos, np.log(pc) - np.log(qc), 0.0)
    out = (vp * logdiff).sum(axis=1)
    tape = _tape_of(p, q)
    if tape is None:
        return out

    def vjp(g):
        gcol = g[:, None]
        # d/dp of p*log(max(p, c)) is logdiff + 1 above the clamp and just
        # logdiff below it, where the log term is constant
        dp = gcol * np.where(pos, logdiff + (vp > KL_CLAMP), 0.0)
        dq = gcol * np.where(vq > KL_CLAMP, -vp / qc, 0.0)
        return dp, dq

    return tape.record(out, (p, q), vjp)


def sq_dist_rows(x, y):
    """Row-wise squared L2 distance sum_i (x_i - y_i)^2 -> shape (B,)."""
    vx, vy = value_of(x), value_of(y)
    _check_same_shape(vx, vy)
    d = vx - vy
    out = (d * d).sum(axis=1)
    tape = _tape_of(x, y)
    if tape is None:
        return out

    def vjp(g):
        gd = 2.0 * g[:, None] * d
        return gd, -gd

    return tape.record(out, (x, y), vjp)


# ---------------------------------------------------------------------------
# single-vector convenience surface


def cosine_sim(x, y):
    """Cosine similarity of two vectors, as a scalar."""
    vx, vy = value_of(x), value_of(y)
    if np.shape(vx) != np.shape(vy):
        raise DimensionMismatch(f"cosine_sim operands differ: {np.shape(vx)} vs {np.shape(vy)}")
    return sum_all(cosine_matrix(reshape(x, (1, -1)), reshape(y, (1, -1))))


def softmax(logits):
    """Softmax of one logit vector."""
    v = value_of(logits)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax requires finite logits")
    return reshape(softmax_rows(reshape(logits, (1, -1))), (-1,))


def kl_div(p, q):
    """KL divergence between two probability vectors, as a scalar."""
    vp, vq = value_of(p), value_of(q)
    if np.shape(vp) != np.shape(vq):
        raise DimensionMismatch(f"kl_div operands differ: {np.shape(vp)} vs {np.shape(vq)}")
    return sum_all(kl_rows(reshape(p, (1, -1)), reshape(q, (1, -1))))


def mse(x, y):
    """Summed squared error between two equally shaped arrays, as a scalar."""
    vx, vy = value_of(x), value_of(y)
    if np.shape(vx) != np.shape(vy):
        raise DimensionMismatch(f"mse operands differ: {np.shape(vx)} vs {np.shape(vy)}")
    return sum_all(sq_dist_rows(reshape(x, (1, -1)), reshape(y, (1, -1))))
