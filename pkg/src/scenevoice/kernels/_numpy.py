"""Pure numpy implementation of the hot kernels."""

from __future__ import annotations

import numpy as np


def cosine_forward(q: np.ndarray, m: np.ndarray):
    """Pairwise cosine similarities between rows of q (B,D) and m (N,D).

    Returns (s, q_norms, m_norms) with s of shape (B, N).
    """
    qn = np.sqrt((q * q).sum(axis=1))
    mn = np.sqrt((m * m).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (q @ m.T) / (qn[:, None] * mn[None, :])
    return s, qn, mn


def cosine_backward(g, q, m, s, qn, mn):
    """Adjoints of cosine_forward: returns (dq, dm) for upstream grad g (B,N)."""
    gn = g / (qn[:, None] * mn[None, :])
    row = (g * s).sum(axis=1) / (qn * qn)
    col = (g * s).sum(axis=0) / (mn * mn)
    dq = gn @ m - row[:, None] * q
    dm = gn.T @ q - col[:, None] * m
    return dq, dm


def softmax_forward(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(g, w):
    """Adjoint of softmax_forward: dL/ds = w * (g - sum(g*w))."""
    dot = (g * w).sum(axis=1, keepdims=True)
    return w * (g - dot)
