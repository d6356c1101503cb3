"""Spatial feature generator: stacked graph-convolution layers whose pooled
outputs are concatenated across depths into one embedding per sample."""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor

GCN_WIDTHS = (128, 64, 32, 16)
GCN_DROPOUT = (0.0, 0.1, 0.1, 0.1)
EMBED_DIM = 2 * sum(GCN_WIDTHS)  # mean and max pooled, all layers concatenated


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric propagation matrix D^-1/2 (A + I) D^-1/2.

    Self-loops guarantee positive degrees, so the inverse square root always
    exists. Rejects non-symmetric input.
    """
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    if adj.min() < 0:
        raise ValueError("adjacency must be nonnegative")
    a_tilde = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * np.outer(inv_sqrt, inv_sqrt)


def gcn_propagate(h: Tensor, adj_norm: Tensor, w: Tensor) -> Tensor:
    """Neighborhood aggregation then linear map: (S @ H) @ W.

    Works batched: h (B, N, C_in), adj_norm (B, N, N), w (C_in, C_out).
    """
    return tt.matmul(tt.matmul(adj_norm, h), w)


def gcn_layer(h: Tensor, adj_norm: Tensor, w: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: Tensor, running_var: Tensor, *, train: bool,
              drop_rate: float = 0.0, drop_mask: np.ndarray | None = None) -> Tensor:
    """One full block: optional input dropout, propagation, then BN and ReLU."""
    if drop_rate > 0.0:
        h = tt.dropout(h, drop_rate, mask=drop_mask, train=train)
    out = gcn_propagate(h, adj_norm, w)
    out = tt.batch_norm(out, gamma, beta, running_mean, running_var, train=train)
    return tt.relu(out)


def jk_pool(h: Tensor) -> Tensor:
    """Mean-pool and max-pool over nodes, concatenated: (B, N, C) -> (B, 2C)."""
    return tt.concat([tt.mean(h, axis=1), tt.amax(h, axis=1)], axis=1)


def jk_concat(pools: list[Tensor]) -> Tensor:
    """Concatenate the per-layer pooled vectors in layer order."""
    if len(pools) == 1:
        return pools[0]
    return tt.concat(pools, axis=1)


def stfg_forward(theta, x: Tensor, adj_norm: Tensor, *, train: bool,
                 drop_masks: list | None = None, want_hidden: bool = False,
                 prefix: str = "stfg"):
    """Embed a batch of graphs: x (B, N, R), adj_norm (B, N, N) -> (B, 480).

    `drop_masks` supplies one keep mask per layer (None entries allowed).
    With `want_hidden`, also returns the post-activation node features of
    every layer for attribution.
    """
    h = x
    pools = []
    hidden = []
    for i, width in enumerate(GCN_WIDTHS, start=1):
        p = f"{prefix}.l{i}"
        mask = drop_masks[i - 1] if drop_masks else None
        h = gcn_layer(h, adj_norm, theta[f"{p}.w"], theta[f"{p}.bn.gamma"],
                      theta[f"{p}.bn.beta"], theta[f"{p}.bn.running_mean"],
                      theta[f"{p}.bn.running_var"], train=train,
                      drop_rate=GCN_DROPOUT[i - 1], drop_mask=mask)
        hidden.append(h)
        pools.append(jk_pool(h))
    z = jk_concat(pools)
    if want_hidden:
        return z, hidden
    return z
