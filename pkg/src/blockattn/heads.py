"""Task heads and training machinery.

Heads take fixed-length sequence encodings (feature axis last, optional
leading batch axes) and produce class probabilities or a regression estimate.
Alongside them live the pieces every training run needs: cross-entropy on
logits, the L2-regularized objective, Glorot init, and Adadelta/Adam steps
operating on a :class:`~blockattn.autodiff.ParamStore`.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Graph,
    GraphError,
    ParamStore,
    absval,
    add,
    affine,
    concat,
    exp,
    expand,
    log,
    mul,
    reduce_max,
    reduce_sum,
    reshape,
    scalar_add,
    scalar_mul,
    softmax,
    sub,
)
from .encoder import (
    _side_params,
    glorot_uniform,
    init_mblosa_params,
    mblosa,
    select_block_length,
)

__all__ = [
    "accuracy",
    "adadelta_step",
    "adam_step",
    "classifier_logits",
    "cross_entropy",
    "glorot_init",
    "init_classifier_params",
    "init_select_params",
    "kl_loss",
    "map_target",
    "nli_head",
    "objective",
    "relatedness_head",
    "relation_rep",
    "sentence_select_head",
]


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """(fan_out, fan_in) matrix, i.i.d. uniform on +-sqrt(6/(fan_in+fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    return glorot_uniform(rng, (fan_out, fan_in))


# ---------------------------------------------------------------------------
# classifier heads
# ---------------------------------------------------------------------------

def _as_column(g: Graph, s: int) -> int:
    return reshape(g, s, (*g.shape(s), 1))


def classifier_logits(g: Graph, s: int, params) -> int:
    """FC -> relu -> FC on a (..., features) encoding; returns (..., classes)."""
    col = _as_column(g, s)
    hidden = affine(g, params["W1"], col, params["b1"], act="relu")
    out = affine(g, params["W2"], hidden, params["b2"])
    return reshape(g, out, g.shape(out)[:-1])


def init_classifier_params(store: ParamStore, features: int, hidden: int,
                           classes: int, rng: np.random.Generator,
                           prefix: str = "head") -> ParamStore:
    store.add(f"{prefix}/W1", glorot_uniform(rng, (hidden, features)), "weight")
    store.add(f"{prefix}/b1", np.zeros(hidden), "bias")
    store.add(f"{prefix}/W2", glorot_uniform(rng, (classes, hidden)), "weight")
    store.add(f"{prefix}/b2", np.zeros(classes), "bias")
    return store


def relation_rep(g: Graph, s1: int, s2: int) -> int:
    """[s1; s2; s1-s2; s1*s2] along the feature axis."""
    if g.shape(s1) != g.shape(s2):
        raise GraphError(f"encoding shapes disagree: {g.shape(s1)} vs {g.shape(s2)}")
    return concat(g, [s1, s2, sub(g, s1, s2), mul(g, s1, s2)], axis=-1)


def nli_head(g: Graph, s_p: int, s_h: int, params) -> int:
    """Premise/hypothesis pair to 3-class probabilities."""
    return softmax(g, classifier_logits(g, relation_rep(g, s_p, s_h), params))


def relatedness_head(g: Graph, s1: int, s2: int, K: int, params) -> tuple[int, int]:
    """Pair encoding to (K-point probability vector, scalar estimate in [1, K]).

    The estimate is the expectation sum_k k * p_k of the predicted
    distribution.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if g.shape(s1) != g.shape(s2):
        raise GraphError(f"encoding shapes disagree: {g.shape(s1)} vs {g.shape(s2)}")
    rep = concat(g, [mul(g, s1, s2), absval(g, sub(g, s1, s2))], axis=-1)
    probs = softmax(g, classifier_logits(g, rep, params))
    beta = g.leaf(np.arange(1, K + 1, dtype=float))
    estimate = reduce_sum(g, mul(g, probs, beta), axis=-1)
    return probs, estimate


# ---------------------------------------------------------------------------
# regression target mapping and KL loss
# ---------------------------------------------------------------------------

def map_target(y: float, K: int) -> np.ndarray:
    """Spread a rating y in [1, K] over the two adjacent integer points so
    that the expectation of the result recovers y exactly."""
    if not 1.0 <= y <= K:
        raise ValueError(f"target {y} outside [1, {K}]")
    p = np.zeros(K)
    low = int(np.floor(y))
    p[low - 1] = low - y + 1.0
    if low < K:
        p[low] = y - low
    return p


def kl_loss(g: Graph, p: np.ndarray, p_hat: int) -> int:
    """Mean KL(p || p_hat) over leading axes; p is a fixed target array.

    Entries of p that are exactly zero contribute nothing regardless of
    p_hat; a zero in p_hat under positive target mass is an error.
    """
    p = np.asarray(p, dtype=float)
    hat = g.value(p_hat)
    if p.shape != hat.shape:
        raise GraphError(f"target shape {p.shape} != prediction shape {hat.shape}")
    if np.any((p > 0) & (hat <= 0)):
        raise GraphError("kl_loss: prediction has zero mass where the target is positive")
    rows = max(1, int(np.prod(p.shape[:-1], dtype=np.int64)))
    # lift zero-target positions of p_hat to 1 so log never sees them;
    # their contribution is multiplied by p = 0 anyway
    lifted = add(g, p_hat, g.leaf(np.where(p > 0, 0.0, 1.0)))
    cross = reduce_sum(g, mul(g, g.leaf(p), log(g, lifted)), axis=None)
    entropy = float(np.sum(np.where(p > 0, p * np.log(p, where=p > 0), 0.0)))
    return scalar_add(g, scalar_mul(g, cross, -1.0 / rows), entropy / rows)


# ---------------------------------------------------------------------------
# sentence selection
# ---------------------------------------------------------------------------

def init_select_params(store: ParamStore, features: int,
                       rng: np.random.Generator,
                       prefix: str = "sel") -> ParamStore:
    """Fusion-layer + scoring parameters for sentence selection; the fused
    per-sentence feature width is 4*features."""
    init_mblosa_params(store, prefix, 4 * features, rng)
    store.add(f"{prefix}/score/W", glorot_uniform(rng, (1, 4 * features)), "weight")
    store.add(f"{prefix}/score/b", np.zeros(1), "bias")
    return store


def sentence_select_head(g: Graph, sentences: int, question: int, store: ParamStore,
                         *, prefix: str = "sel") -> int:
    """Score m candidate sentences against a question: (..., m) probabilities.

    ``sentences`` is (..., d, m); ``question`` is (..., d).  Each sentence is
    paired with the question as [u; q; u-q; u*q], a block context-fusion
    layer mixes information across sentences, and a per-sentence linear score
    feeds one softmax over the m candidates.
    """
    d, m = g.shape(sentences)[-2:]
    if g.shape(question)[-1] != d:
        raise GraphError(f"question width {g.shape(question)[-1]} != sentence width {d}")
    q_cols = expand(g, question, axis=-1, size=m)
    paired = concat(g, [sentences, q_cols,
                        sub(g, sentences, q_cols), mul(g, sentences, q_cols)],
                    axis=-2)                                        # (..., 4d, m)
    fused = mblosa(g, paired, "none", select_block_length(m),
                   _side_params(g, store, prefix))
    scores = affine(g, store.leaf(g, f"{prefix}/score/W"), fused,
                    store.leaf(g, f"{prefix}/score/b"))             # (..., 1, m)
    return reshape(g, softmax(g, scores), (*g.shape(scores)[:-2], m))


# ---------------------------------------------------------------------------
# losses and the objective
# ---------------------------------------------------------------------------

def cross_entropy(g: Graph, logits: int, labels: np.ndarray) -> int:
    """Mean negative log-likelihood of integer labels under (..., C) logits."""
    *lead, classes = g.shape(logits)
    labels = np.asarray(labels)
    if labels.shape != tuple(lead):
        raise GraphError(f"labels shaped {labels.shape}, expected {tuple(lead)}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise GraphError(f"labels outside [0, {classes})")
    shifted = sub(g, logits, expand(g, reduce_max(g, logits, axis=-1),
                                    axis=-1, size=classes))
    lse = log(g, reduce_sum(g, exp(g, shifted), axis=-1))            # (...,)
    onehot = np.zeros((labels.size, classes))
    onehot[np.arange(labels.size), labels.reshape(-1)] = 1.0
    onehot = onehot.reshape(*labels.shape, classes)
    picked = reduce_sum(g, mul(g, shifted, g.leaf(onehot)), axis=-1)
    total = reduce_sum(g, sub(g, lse, picked), axis=None)
    return scalar_mul(g, total, 1.0 / max(1, labels.size))


def accuracy(logits_value: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions matching the labels."""
    return float(np.mean(np.argmax(logits_value, axis=-1) == np.asarray(labels)))


def objective(g: Graph, task_loss: int, store: ParamStore, gamma: float) -> int:
    """task_loss + gamma * sum of squared weight-matrix entries.

    Biases and embedding tables are exempt from the penalty.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0.0:
        return task_loss
    penalty = None
    for path in store.weight_paths():
        w = store.leaf(g, path)
        term = reduce_sum(g, mul(g, w, w), axis=None)
        penalty = term if penalty is None else add(g, penalty, term)
    if penalty is None:
        return task_loss
    return add(g, task_loss, scalar_mul(g, penalty, gamma))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _check_grad(store: ParamStore, path: str, grad: np.ndarray) -> np.ndarray:
    value = store.values[path]
    grad = np.asarray(grad)
    if grad.shape != value.shape:
        raise GraphError(f"gradient for {path} shaped {grad.shape}, "
                         f"parameter is {value.shape}")
    return grad


def adadelta_step(store: ParamStore, grads: dict, *,
                  rho: float = 0.95, eps: float = 1e-6) -> None:
    """One Adadelta update in place.

    Keeps running averages of squared gradients and squared updates; the
    effective step size adapts per coordinate with no learning rate.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must be in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    for path, grad in grads.items():
        grad = _check_grad(store, path, grad)
        value = store.values[path]
        state = store.state.setdefault(path, {})
        if not state:
            state["sq_grad"] = np.zeros_like(value)
            state["sq_step"] = np.zeros_like(value)
        state["sq_grad"] = rho * state["sq_grad"] + (1.0 - rho) * grad * grad
        step = -np.sqrt(state["sq_step"] + eps) / np.sqrt(state["sq_grad"] + eps) * grad
        state["sq_step"] = rho * state["sq_step"] + (1.0 - rho) * step * step
        store.values[path] = value + step.astype(value.dtype)


def adam_step(store: ParamStore, grads: dict, *, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for path, grad in grads.items():
        grad = _check_grad(store, path, grad)
        value = store.values[path]
        state = store.state.setdefault(path, {})
        if not state:
            state["m"] = np.zeros_like(value)
            state["v"] = np.zeros_like(value)
            state["t"] = 0
        state["t"] += 1
        state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
        state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
        m_hat = state["m"] / (1.0 - beta1 ** state["t"])
        v_hat = state["v"] / (1.0 - beta2 ** state["t"])
        step = -lr * m_hat / (np.sqrt(v_hat) + eps)
        store.values[path] = value + step.astype(value.dtype)
