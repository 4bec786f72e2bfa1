"""Attention primitives over column-token layout.

A sequence is a tensor of shape ``(..., d, n)``: feature rows, token columns,
optional leading batch axes.  Parameters are passed as a mapping from key to
graph node id so every function here is a pure graph builder.

The family, from simplest to the one the encoder uses:

* ``vanilla_attention``   — scalar score per token, one probability row.
* ``multi_dim_attention`` — a score *vector* per token; each feature gets its
  own probability row over tokens.
* ``source2token``        — multi-dim attention with the query removed.
* ``token2token``         — multi-dim attention where every token is a query.
* ``masked_self_attention`` — token2token with bounded scores
  ``c * tanh(./c)`` and an additive position mask.

Masking conventions: a ``-inf`` entry removes an attendee; a softmax row that
is entirely ``-inf`` yields an all-zero probability row, hence a zero output
vector.  Padding uses per-token validity flags: invalid tokens are removed as
attendees and their own outputs are dropped by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Graph,
    GraphError,
    add,
    affine,
    expand,
    matmul,
    mul,
    reduce_sum,
    reshape,
    scalar_mul,
    softmax,
    swap_last,
    tanh,
    transpose,
    weighted_sum,
)

MASK_KINDS = ("forward", "backward", "none")
NEG_INF = float("-inf")


@dataclass(frozen=True)
class Mask:
    """Additive position mask; ``entries[i, j]`` gates attendee i for query j."""

    n: int
    kind: str
    entries: np.ndarray


@dataclass(frozen=True)
class AttnConfig:
    d_e: int
    d_h: int
    c: float = 5.0
    activation: str = "relu"
    multi_dim: bool = True

    def __post_init__(self):
        if self.d_e < 1 or self.d_h < 1:
            raise ValueError(f"dimensions must be positive, got d_e={self.d_e} d_h={self.d_h}")
        if self.c <= 0:
            raise ValueError(f"score ceiling c must be positive, got {self.c}")
        if self.activation not in ("relu", "tanh", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def build_mask(n: int, kind: str) -> Mask:
    """Asymmetric position mask of shape (n, n).

    ``forward`` admits attendee i for query j iff i < j, ``backward`` iff
    i > j; both mask the diagonal.  ``none`` admits everything.
    """
    if n < 1:
        raise ValueError(f"mask size must be >= 1, got {n}")
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}, expected one of {MASK_KINDS}")
    if kind == "none":
        entries = np.zeros((n, n))
    else:
        i, j = np.indices((n, n))
        admit = i < j if kind == "forward" else i > j
        entries = np.where(admit, 0.0, NEG_INF)
    return Mask(n=n, kind=kind, entries=entries)


def _act(g: Graph, x: int, activation: str) -> int:
    if activation not in ("relu", "tanh", "elu"):
        raise GraphError(f"unknown activation {activation!r}")
    return g.apply(activation, (x,))


def validity_bias(valid: np.ndarray) -> np.ndarray:
    """Additive mask from boolean flags: 0 where valid, -inf where not."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF)


# ---------------------------------------------------------------------------
# compatibility functions (token vs. external query)
# ---------------------------------------------------------------------------

def additive_compat(g: Graph, x: int, q: int, params, *,
                    multi_dim: bool = False, activation: str = "relu") -> int:
    """Scores of every token column against one query column.

    Shapes: x (d_e, n), q (d_q, 1).  Returns (1, n) scalar scores, or
    (d_e, n) feature-level scores when ``multi_dim`` (keys 'W'/'b' replace
    'w'/'b').
    """
    hidden_q = matmul(g, params["W2"], q)                   # (d_h, 1)
    n = g.shape(x)[-1]
    q_cols = expand(g, reshape(g, hidden_q, (g.shape(hidden_q)[0],)), axis=-1, size=n)
    pre = add(g, affine(g, params["W1"], x, params["b1"]), q_cols)
    hidden = _act(g, pre, activation)
    key = "W" if multi_dim else "w"
    return affine(g, params[key], hidden, params["b"])       # (1, n) or (d_e, n)


def multiplicative_compat(g: Graph, x: int, q: int, params) -> int:
    """Dot-product scores ``<W1 x_i, W2 q>``; x (d_e, n), q (d_q, 1) -> (1, n)."""
    lhs = matmul(g, params["W1"], x)                         # (d_h, n)
    rhs = matmul(g, params["W2"], q)                         # (d_h, 1)
    return matmul(g, swap_last(g, rhs), lhs)                 # (1, n)


# ---------------------------------------------------------------------------
# attention modules
# ---------------------------------------------------------------------------

def vanilla_attention(g: Graph, x: int, q: int, params, *,
                      compat: str = "additive", activation: str = "relu") -> int:
    """Expectation of token columns under one score row; returns (d_e, 1)."""
    if compat == "additive":
        scores = additive_compat(g, x, q, params, activation=activation)
    elif compat == "multiplicative":
        scores = multiplicative_compat(g, x, q, params)
    else:
        raise GraphError(f"unknown compat {compat!r}")
    probs = softmax(g, scores)                               # (1, n)
    return matmul(g, x, swap_last(g, probs))                 # (d_e, 1)


def multi_dim_attention(g: Graph, x: int, q: int, params, *,
                        activation: str = "relu") -> int:
    """Per-feature attention: each feature row carries its own probability
    row over tokens.  Returns (d_e, 1)."""
    scores = additive_compat(g, x, q, params, multi_dim=True, activation=activation)
    probs = softmax(g, scores)                               # (d_e, n)
    s = reduce_sum(g, mul(g, probs, x), axis=-1)             # (d_e,)
    return reshape(g, s, (g.shape(x)[-2], 1))


def _attach_validity(g: Graph, scores: int, valid, *, pairwise: bool) -> int:
    """Add -inf columns for invalid attendees.

    ``scores`` is (..., d, n) or, when ``pairwise``, (..., q, d, n); ``valid``
    is boolean (..., n) aligned with the trailing token axis.
    """
    bias = validity_bias(valid)
    node = g.leaf(bias)
    node = expand(g, node, axis=-2, size=g.shape(scores)[-2])
    if pairwise:
        node = expand(g, node, axis=-3, size=g.shape(scores)[-3])
    return add(g, scores, node)


def source2token(g: Graph, x: int, params, *, activation: str = "relu",
                 valid: np.ndarray | None = None) -> int:
    """Query-free multi-dim attention pooled over tokens: (..., d, n) -> (..., d).

    Invalid tokens are excluded from the pool; a sequence with no valid token
    is an error here (block pipelines handle that case themselves).
    """
    if valid is not None and not np.asarray(valid, dtype=bool).any(axis=-1).all():
        raise GraphError("source2token: a sequence has no valid tokens")
    return _s2t_core(g, x, params, activation=activation, valid=valid)


def _s2t_core(g: Graph, x: int, params, *, activation: str = "relu", valid=None) -> int:
    hidden = affine(g, params["W1"], x, params["b1"], act=activation)
    scores = affine(g, params["W"], hidden, params["b"])     # (..., d, n)
    if valid is not None:
        scores = _attach_validity(g, scores, valid, pairwise=False)
    probs = softmax(g, scores)
    return weighted_sum(g, probs, x)                         # (..., d)


def _pair_scores(g: Graph, x: int, params, *, n: int) -> tuple[int, int]:
    """Raw pairwise pre-activations laid out (..., query, feature, attendee).

    Returns (pre, hidden_width).
    """
    a_side = matmul(g, params["W1"], x)                      # (..., h, n)
    q_side = matmul(g, params["W2"], x)                      # (..., h, n)
    a_exp = expand(g, a_side, axis=-3, size=n)               # (..., q, h, a) view
    q_exp = expand(g, swap_last(g, q_side), axis=-1, size=n)  # (..., q, h, 1->a) view
    pre = add(g, a_exp, q_exp)
    b_cols = expand(g, params["b1"], axis=-1, size=n)        # (h, a)
    return add(g, pre, b_cols), g.shape(a_side)[-2]


def token2token(g: Graph, x: int, params, *, activation: str = "relu",
                mask: Mask | None = None, valid: np.ndarray | None = None) -> int:
    """Multi-dim attention with every token as query: (..., d, n) -> (..., d, n)."""
    n = g.shape(x)[-1]
    pre, _ = _pair_scores(g, x, params, n=n)
    hidden = _act(g, pre, activation)                        # (..., q, h, a)
    scores = matmul(g, params["W"], hidden)                  # (..., q, d, a)
    scores = add(g, scores, expand(g, params["b"], axis=-1, size=n))
    return _pair_attend(g, x, scores, mask=mask, valid=valid, n=n)


def masked_self_attention(g: Graph, x: int, params, mask: Mask | np.ndarray, *,
                          c: float = 5.0, valid: np.ndarray | None = None) -> int:
    """Position-masked self-attention with bounded feature-level scores.

    Scores are ``c * tanh((W1 x_i + W2 x_j + b1) / c) + mask[i, j]``; each
    (query j, feature k) pair carries a softmax over attendees i.  Output
    keeps the input shape (..., d, n).
    """
    if c <= 0:
        raise GraphError(f"masked_self_attention: c must be positive, got {c}")
    n = g.shape(x)[-1]
    pre, _ = _pair_scores(g, x, params, n=n)
    bounded = scalar_mul(g, tanh(g, scalar_mul(g, pre, 1.0 / c)), c)
    return _pair_attend(g, x, bounded, mask=mask, valid=valid, n=n)


def _pair_attend(g: Graph, x: int, scores: int, *, mask, valid, n: int) -> int:
    """Mask, normalize and pool pairwise scores (..., q, d, a) back to (..., d, n)."""
    if mask is not None:
        entries = mask.entries if isinstance(mask, Mask) else np.asarray(mask)
        if entries.shape != (n, n):
            raise GraphError(
                f"mask shape {entries.shape} does not match sequence length {n}")
        mask_qa = g.leaf(entries.T)                          # (q, a)
        mask_qda = expand(g, mask_qa, axis=-2, size=g.shape(scores)[-2])
        scores = add(g, scores, mask_qda)
    if valid is not None:
        scores = _attach_validity(g, scores, valid, pairwise=True)
    probs = softmax(g, scores)                               # (..., q, d, a)
    pooled = reduce_sum(g, mul(g, probs, expand(g, x, axis=-3, size=n)), axis=-1)
    return swap_last(g, pooled)                              # (..., d, q)
