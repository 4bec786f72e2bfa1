"""Block self-attention sequence encoder.

The encoder splits a length-n sequence into m = ceil(n/r) blocks of length r,
runs a shared masked self-attention inside every block, pools each block to a
summary vector, runs a second masked self-attention across the summaries, and
fuses the result back into per-token features through two sigmoid gates.  One
such stack is ``mblosa``; the bi-directional encoder runs a forward-masked and
a backward-masked stack on untied projections of the input and concatenates
them (``biblosa``), optionally pooling to a fixed-length vector
(``biblosan_encode``).

Sequences are carried as ``(..., d, n)`` arrays (features x tokens, any
leading batch axes).  Internally blocks live in a ``(..., m, d, r)`` layout so
the m blocks evaluate as one batched attention call and block-level features
broadcast across token positions as views rather than copies.

Padding convention: the last block is zero-padded and the pad positions are
flagged invalid; invalid positions score -inf in every softmax, contribute
nothing to any pool, and are dropped again on de-partition.  A block with no
valid tokens pools to the zero vector and is itself invalid at the
inter-block level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import _s2t_core, build_mask, masked_self_attention, source2token
from .autodiff import (
    Graph,
    GraphError,
    ParamStore,
    add,
    affine,
    concat,
    gate_merge,
    matmul,
    mul,
    reshape,
    sigmoid,
    slice_node,
    swap_last,
    transpose,
)

__all__ = [
    "BlockPlan",
    "EncoderConfig",
    "biblosa",
    "biblosan_encode",
    "context_fusion",
    "departition",
    "dropout",
    "embed",
    "full_san_context",
    "init_encoder_params",
    "init_mblosa_params",
    "inter_block",
    "intra_block",
    "mblosa",
    "partition",
    "select_block_length",
    "select_block_length_batched",
]


# ---------------------------------------------------------------------------
# block-length selection
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_block_length(n: int) -> int:
    """Block length minimizing the r^2*m + m^2 memory proxy: round((2n)^(1/3)).

    Nearest integer, ties round up, clamped to [1, n].
    """
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    r = _round_half_up((2.0 * n) ** (1.0 / 3.0))
    return max(1, min(r, n))


def select_block_length_batched(mu: float, sigma: float, batch: int) -> int:
    """Block length for a batch of variable-length sequences.

    Uses the Gumbel-style bound E[max length] <= sigma*sqrt(2 ln B) + mu on a
    batch of B normally distributed lengths, then applies the same cube-root
    rule as :func:`select_block_length`.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    bound = sigma * math.sqrt(2.0 * math.log(batch)) + mu
    return max(1, _round_half_up((2.0 * bound) ** (1.0 / 3.0)))


@dataclass(frozen=True)
class BlockPlan:
    """How a length-n sequence maps onto m blocks of length r."""

    n: int
    r: int
    m: int
    pad: int

    @classmethod
    def for_length(cls, n: int, r: int) -> "BlockPlan":
        if n < 1:
            raise ValueError("sequence length must be >= 1")
        if r < 1:
            raise ValueError("block length must be >= 1")
        m = -(-n // r)
        return cls(n=n, r=r, m=m, pad=m * r - n)


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and conventions of one bi-directional block encoder.

    ``r`` may be the string "auto", in which case :meth:`resolve_r` picks the
    block length from the sequence length (or from the batch length statistics
    ``mu``/``sigma`` when no single length applies).
    """

    d_e: int
    d_h: int
    r: int | str = "auto"
    batch_size: int = 64
    mu: float | None = None
    sigma: float = 0.0
    keep_prob: float = 1.0
    c: float = 5.0
    activation: str = "relu"

    def __post_init__(self):
        if self.d_e < 1 or self.d_h < 1:
            raise ValueError("dimensions must be positive")
        if isinstance(self.r, str):
            if self.r != "auto":
                raise ValueError("r must be an integer or 'auto'")
        elif self.r < 1:
            raise ValueError("r must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.c <= 0:
            raise ValueError("c must be positive")

    def resolve_r(self, n: int | None = None) -> int:
        if isinstance(self.r, int):
            return self.r
        if n is not None:
            return select_block_length(n)
        if self.mu is None:
            raise ValueError("r='auto' needs a sequence length or mu/sigma stats")
        return select_block_length_batched(self.mu, self.sigma, self.batch_size)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_out, fan_in = shape[0], shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_encoder_params(store: ParamStore, cfg: EncoderConfig,
                        rng: np.random.Generator, *,
                        vocab: int | None = None) -> ParamStore:
    """Register every encoder parameter under stable string paths.

    When ``vocab`` is given an embedding table ``emb/table`` is included,
    initialized uniform(-0.05, 0.05).  Draw order is fixed, so a given rng
    state always produces the same parameters.
    """
    d_e, d_h = cfg.d_e, cfg.d_h

    def weight(path, shape):
        store.add(path, glorot_uniform(rng, shape), "weight")

    def bias(path, dim):
        store.add(path, np.zeros(dim), "bias")

    if vocab is not None:
        store.add("emb/table", rng.uniform(-0.05, 0.05, size=(d_e, vocab)),
                  "embedding")
    for side in ("fw", "bw"):
        weight(f"{side}/fc/W", (d_h, d_e))
        bias(f"{side}/fc/b", d_h)
        init_mblosa_params(store, side, d_h, rng)
    weight("pool/W1", (d_h, 2 * d_h))
    bias("pool/b1", d_h)
    weight("pool/W", (2 * d_h, d_h))
    bias("pool/b", 2 * d_h)
    return store


def init_mblosa_params(store: ParamStore, prefix: str, d: int,
                       rng: np.random.Generator) -> ParamStore:
    """Register one directional block stack's parameters under ``prefix/``."""

    def weight(path, shape):
        store.add(path, glorot_uniform(rng, shape), "weight")

    def bias(path, dim):
        store.add(path, np.zeros(dim), "bias")

    for part in ("intra", "inter"):
        weight(f"{prefix}/{part}/W1", (d, d))
        weight(f"{prefix}/{part}/W2", (d, d))
        bias(f"{prefix}/{part}/b1", d)
    weight(f"{prefix}/blk/W1", (d, d))
    bias(f"{prefix}/blk/b1", d)
    weight(f"{prefix}/blk/W", (d, d))
    bias(f"{prefix}/blk/b", d)
    weight(f"{prefix}/gate/Wo", (d, d))
    weight(f"{prefix}/gate/Wv", (d, d))
    bias(f"{prefix}/gate/b", d)
    weight(f"{prefix}/fuse/Wf", (d, 3 * d))
    bias(f"{prefix}/fuse/bf", d)
    weight(f"{prefix}/fuse/Wg", (d, 3 * d))
    bias(f"{prefix}/fuse/bg", d)
    return store


def _leaves(g: Graph, store: ParamStore, prefix: str, names: tuple[str, ...]):
    return {name: store.leaf(g, f"{prefix}/{name}") for name in names}


# ---------------------------------------------------------------------------
# embedding, dropout
# ---------------------------------------------------------------------------

def embed(g: Graph, table: int, tokens: np.ndarray) -> int:
    """Look token ids up as columns of the embedding table.

    tokens may carry leading batch axes; output is (..., d_e, n).
    """
    ids = np.asarray(tokens)
    out = g.apply("embedding-lookup", (table,), ids=ids)   # (d_e, ..., n)
    if ids.ndim > 1:
        perm = tuple(range(1, ids.ndim)) + (0, ids.ndim)
        out = transpose(g, out, perm)
    return out


def dropout(g: Graph, x: int, keep_prob: float,
            rng: np.random.Generator | None) -> int:
    """Inverted dropout; identity when keep_prob is 1 or no rng is supplied."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must be in (0, 1]")
    if keep_prob == 1.0 or rng is None:
        return x
    keep = (rng.random(g.shape(x)) < keep_prob).astype(g.value(x).dtype)
    return mul(g, x, g.leaf(keep / keep_prob))


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def partition(g: Graph, x: int, r: int, valid: np.ndarray | None = None):
    """Split (..., d, n) into the block layout (..., m, d, r).

    Returns (blocks node, BlockPlan, block validity flags of shape (..., m, r)).
    Pad columns are zeros and flagged invalid.
    """
    *lead, d, n = g.shape(x)
    plan = BlockPlan.for_length(n, r)
    if valid is None:
        flags = np.ones(n, dtype=bool)
    else:
        flags = np.asarray(valid, dtype=bool)
        if flags.shape[-1] != n:
            raise GraphError(f"validity flags cover {flags.shape[-1]} tokens, "
                             f"sequence has {n}")
    if plan.pad:
        pad = g.leaf(np.zeros((*lead, d, plan.pad)))
        x = concat(g, [x, pad], axis=-1)
        flags = np.concatenate(
            [flags, np.zeros(flags.shape[:-1] + (plan.pad,), dtype=bool)], axis=-1)
    blocks = reshape(g, x, (*lead, d, plan.m, plan.r))
    axes = len(lead)
    blocks = transpose(g, blocks, (*range(axes), axes + 1, axes, axes + 2))
    return blocks, plan, flags.reshape(flags.shape[:-1] + (plan.m, plan.r))


def departition(g: Graph, blocks: int, plan: BlockPlan) -> int:
    """Inverse of :func:`partition`: (..., m, d, r) back to (..., d, n)."""
    *lead, m, d, r = g.shape(blocks)
    if (m, r) != (plan.m, plan.r):
        raise GraphError(f"blocks are {m}x{r}, plan says {plan.m}x{plan.r}")
    axes = len(lead)
    seq = transpose(g, blocks, (*range(axes), axes + 1, axes, axes + 2))
    flat = reshape(g, seq, (*lead, d, m * r))
    if plan.pad:
        flat = slice_node(g, flat, axis=-1, start=0, size=plan.n)
    return flat


# ---------------------------------------------------------------------------
# the three mBloSA stages
# ---------------------------------------------------------------------------

def intra_block(g: Graph, blocks: int, mask_kind: str, params, *,
                block_valid: np.ndarray | None = None, c: float = 5.0) -> int:
    """Shared masked self-attention inside every block: (..., m, d, r) -> same."""
    r = g.shape(blocks)[-1]
    return masked_self_attention(g, blocks, params, build_mask(r, mask_kind),
                                 c=c, valid=block_valid)


def inter_block(g: Graph, h_blocks: int, mask_kind: str, params, *,
                block_valid: np.ndarray | None = None, c: float = 5.0) -> int:
    """Pool each block, attend across the pools, gate the two: -> (..., d, m).

    ``params`` is a mapping with sub-maps "blk" (shared source2token), "inter"
    (masked self-attention across summaries) and "gate" (Wo, Wv, b).  Blocks
    with no valid token pool to zero vectors and are masked out of the
    summary-level attention.
    """
    m = g.shape(h_blocks)[-3]
    v_md = _s2t_core(g, h_blocks, params["blk"], valid=block_valid)  # (..., m, d)
    v = swap_last(g, v_md)                                           # (..., d, m)
    summary_valid = None
    if block_valid is not None:
        summary_valid = np.asarray(block_valid, dtype=bool).any(axis=-1)
    o = masked_self_attention(g, v, params["inter"], build_mask(m, mask_kind),
                              c=c, valid=summary_valid)
    gate = params["gate"]
    pre = add(g, matmul(g, gate["Wo"], o), affine(g, gate["Wv"], v, gate["b"]))
    return gate_merge(g, sigmoid(g, pre), o, v)


def _fuse_blocks(g: Graph, x_blocks: int, h_blocks: int, e: int, params, *,
                 activation: str = "relu") -> int:
    """Gated feature fusion in block layout; e is (..., d, m)."""
    r = g.shape(x_blocks)[-1]
    e_blocks = g.apply("expand", (swap_last(g, e),), axis=-1, size=r)
    stacked = concat(g, [x_blocks, h_blocks, e_blocks], axis=-2)
    f = affine(g, params["Wf"], stacked, params["bf"], act=activation)
    gate = affine(g, params["Wg"], stacked, params["bg"], act="sigmoid")
    return gate_merge(g, gate, f, x_blocks)


def context_fusion(g: Graph, x: int, h: int, e: int, plan: BlockPlan, params, *,
                   valid: np.ndarray | None = None,
                   activation: str = "relu") -> int:
    """Fuse token features x, intra-block features h and block features e.

    Every token in a block sees the same (duplicated) block feature column.
    Output matches the shape of x.
    """
    if g.shape(x) != g.shape(h):
        raise GraphError(f"x and h disagree: {g.shape(x)} vs {g.shape(h)}")
    x_blocks, _, _ = partition(g, x, plan.r, valid)
    h_blocks, _, _ = partition(g, h, plan.r)
    fused = _fuse_blocks(g, x_blocks, h_blocks, e, params, activation=activation)
    return departition(g, fused, plan)


def mblosa(g: Graph, x: int, mask_kind: str, r: int, params, *,
           valid: np.ndarray | None = None, c: float = 5.0,
           activation: str = "relu") -> int:
    """One directional block self-attention stack: (..., d, n) -> (..., d, n).

    ``params`` holds sub-maps "intra", "blk", "inter", "gate", "fuse".
    """
    blocks, plan, block_valid = partition(g, x, r, valid)
    h = intra_block(g, blocks, mask_kind, params["intra"],
                    block_valid=block_valid, c=c)
    e = inter_block(g, h, mask_kind, params, block_valid=block_valid, c=c)
    fused = _fuse_blocks(g, blocks, h, e, params["fuse"], activation=activation)
    return departition(g, fused, plan)


# ---------------------------------------------------------------------------
# bi-directional encoders
# ---------------------------------------------------------------------------

_SIDE_PARTS = {
    "intra": ("W1", "W2", "b1"),
    "blk": ("W1", "b1", "W", "b"),
    "inter": ("W1", "W2", "b1"),
    "gate": ("Wo", "Wv", "b"),
    "fuse": ("Wf", "bf", "Wg", "bg"),
}


def _side_params(g: Graph, store: ParamStore, side: str):
    return {part: _leaves(g, store, f"{side}/{part}", names)
            for part, names in _SIDE_PARTS.items()}


def biblosa(g: Graph, x: int, store: ParamStore, r: int, *,
            valid: np.ndarray | None = None, c: float = 5.0,
            activation: str = "relu", keep_prob: float = 1.0,
            rng: np.random.Generator | None = None,
            mask_kinds: tuple[str, str] = ("forward", "backward")) -> int:
    """Bi-directional context fusion: (..., d_e, n) -> (..., 2*d_h, n).

    Untied projections feed a forward-masked and a backward-masked block
    stack whose outputs are concatenated along the feature axis.
    ``mask_kinds`` can override the two directions (an all-"none" pair gives
    the order-blind ablation).
    """
    halves = []
    for side, kind in zip(("fw", "bw"), mask_kinds):
        fc = _leaves(g, store, f"{side}/fc", ("W", "b"))
        xi = dropout(g, x, keep_prob, rng)
        projected = affine(g, fc["W"], xi, fc["b"], act="relu")
        halves.append(mblosa(g, projected, kind, r, _side_params(g, store, side),
                             valid=valid, c=c, activation=activation))
    return concat(g, halves, axis=-2)


def biblosan_encode(g: Graph, tokens: np.ndarray, store: ParamStore,
                    cfg: EncoderConfig, *, valid: np.ndarray | None = None,
                    rng: np.random.Generator | None = None,
                    return_context: bool = False,
                    mask_kinds: tuple[str, str] = ("forward", "backward")):
    """Encode token ids to a fixed-length vector of size 2*d_h.

    The ids are embedded, passed through :func:`biblosa`, and pooled with a
    final query-free attention that has its own parameters.  ``rng`` enables
    dropout (training mode); omit it for deterministic evaluation.
    """
    ids = np.asarray(tokens)
    r = cfg.resolve_r(ids.shape[-1])
    x = embed(g, store.leaf(g, "emb/table"), ids)
    u_bi = biblosa(g, x, store, r, valid=valid, c=cfg.c,
                   activation=cfg.activation, keep_prob=cfg.keep_prob, rng=rng,
                   mask_kinds=mask_kinds)
    pooled_in = dropout(g, u_bi, cfg.keep_prob, rng)
    s = source2token(g, pooled_in, _leaves(g, store, "pool", ("W1", "b1", "W", "b")),
                     valid=valid)
    return (s, u_bi) if return_context else s


def full_san_context(g: Graph, x: int, store: ParamStore, *,
                     valid: np.ndarray | None = None, c: float = 5.0) -> int:
    """Quadratic-memory comparator: the same bounded pairwise attention run
    over the whole sequence per direction, no block structure.

    Reuses the fc and intra parameter sets, so one initialized store serves
    both encoders.
    """
    n = g.shape(x)[-1]
    halves = []
    for side, kind in (("fw", "forward"), ("bw", "backward")):
        fc = _leaves(g, store, f"{side}/fc", ("W", "b"))
        projected = affine(g, fc["W"], x, fc["b"], act="relu")
        halves.append(masked_self_attention(
            g, projected, _leaves(g, store, f"{side}/intra", ("W1", "W2", "b1")),
            build_mask(n, kind), c=c, valid=valid))
    return concat(g, halves, axis=-2)
