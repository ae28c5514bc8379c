"""Normalized adjacency, its powers, and the per-head structural attention bias."""
from __future__ import annotations

import numpy as np


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    a = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def adjacency_powers(norm_adj: np.ndarray, m: int) -> np.ndarray:
    """Stack ``[Ã, Ã², ..., Ã^m]`` with shape (m, L, L)."""
    if m < 1:
        raise ValueError(f"power order m must be >= 1, got {m}")
    out = np.empty((m,) + norm_adj.shape, dtype=np.float64)
    out[0] = norm_adj
    for t in range(1, m):
        out[t] = out[t - 1] @ norm_adj
    return out


def structure_bias(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-head bias φ_h = Σ_t w[h, t]·Ã^(t+1) + w[h, m].

    ``weights`` has shape (heads, m + 1); the last column is the bias.
    Returns an array of shape (heads, L, L).
    """
    stack = np.asarray(stack, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    m = stack.shape[0]
    if weights.ndim != 2 or weights.shape[1] != m + 1:
        raise ValueError(f"encoder weights must have shape (heads, {m + 1}), got {weights.shape}")
    return np.einsum("ht,tij->hij", weights[:, :m], stack) + weights[:, m][:, None, None]


def batch_powers(adjs: list[np.ndarray], m: int, length: int) -> np.ndarray:
    """Padded (B, L, L, m) power stacks for a batch; padding rows/cols are zero."""
    out = np.zeros((len(adjs), length, length, m), dtype=np.float64)
    for b, adj in enumerate(adjs):
        n = adj.shape[0]
        out[b, :n, :n, :] = np.moveaxis(adjacency_powers(normalize_adjacency(adj), m), 0, -1)
    return out
