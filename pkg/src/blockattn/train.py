"""Training and evaluation on the synthetic tasks.

One graph per step, float32, training-mode backward (interior buffers freed
as the sweep retreats).  Everything downstream of the run seed is
deterministic: batch order, dropout, parameter init, and the metrics log are
byte-for-byte reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import source2token
from .autodiff import Graph, ParamStore, finite_difference_check
from .config import RunConfig, VARIANTS, build_run_config, run_config_flat
from .encoder import biblosan_encode, embed, glorot_uniform, init_encoder_params
from .heads import (
    accuracy,
    adadelta_step,
    adam_step,
    classifier_logits,
    cross_entropy,
    init_classifier_params,
    objective,
    relation_rep,
)
from .seeding import substream
from .serialize import load_model, save_model
from .tasks import Dataset, generate_task, pad_batch

METRICS_HEADER = "step,loss,val_acc"

MODEL_FILE = "model.bin"
METRICS_FILE = "metrics.csv"

_MASK_KINDS = {"full": ("forward", "backward"), "none-mask": ("none", "none")}

_OPTIMIZERS = {"adadelta": adadelta_step, "adam": adam_step}


class TrainingDiverged(RuntimeError):
    """Loss left the reals; carries the offending step."""

    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainResult:
    steps_run: int
    best_val: float
    final_val: float
    metrics_path: Path
    model_path: Path


def init_model(cfg: RunConfig) -> ParamStore:
    """Parameters for the configured variant, float32, derived from the seed."""
    rng = substream(cfg.seed, "init")
    enc = cfg.encoder
    store = ParamStore()
    if cfg.train.variant in _MASK_KINDS:
        init_encoder_params(store, enc, rng, vocab=cfg.task.vocab)
        features = 2 * enc.d_h
    elif cfg.train.variant == "s2t-only":
        store.add("emb/table",
                  rng.uniform(-0.05, 0.05, size=(enc.d_e, cfg.task.vocab)),
                  "embedding")
        store.add("pool/W1", glorot_uniform(rng, (enc.d_e, enc.d_e)), "weight")
        store.add("pool/b1", np.zeros(enc.d_e), "bias")
        store.add("pool/W", glorot_uniform(rng, (enc.d_e, enc.d_e)), "weight")
        store.add("pool/b", np.zeros(enc.d_e), "bias")
        features = enc.d_e
    else:
        raise ValueError(f"variant must be one of {VARIANTS}")
    init_classifier_params(store, features, enc.d_h, cfg.task.classes, rng)
    return store.astype(np.float32)


def encode_batch(g: Graph, store: ParamStore, cfg: RunConfig,
                 ids: np.ndarray, valid: np.ndarray,
                 rng: np.random.Generator | None = None) -> int:
    """Fixed-length encodings (..., features) for a padded id batch."""
    variant = cfg.train.variant
    if variant == "s2t-only":
        x = embed(g, store.leaf(g, "emb/table"), ids)
        pool = {k: store.leaf(g, f"pool/{k}") for k in ("W1", "b1", "W", "b")}
        return source2token(g, x, pool, valid=valid)
    return biblosan_encode(g, ids, store, cfg.encoder, valid=valid, rng=rng,
                           mask_kinds=_MASK_KINDS[variant])


def evaluate(store: ParamStore, cfg: RunConfig, data: Dataset) -> float:
    """Deterministic accuracy over a dataset (dropout off)."""
    correct = 0
    batch = cfg.train.batch_size
    for lo in range(0, len(data), batch):
        chunk = data.sequences[lo:lo + batch]
        labels = data.labels[lo:lo + batch]
        ids, valid = pad_batch(chunk)
        with Graph(np.float32) as g:
            s = encode_batch(g, store, cfg, ids, valid)
            logits = classifier_logits(
                g, s, {k: store.leaf(g, f"head/{k}") for k in ("W1", "b1", "W2", "b2")})
            correct += int(round(accuracy(g.value(logits), labels) * len(labels)))
    return correct / len(data)


def _resolved(cfg: RunConfig) -> RunConfig:
    """Pin r to a concrete block length for the whole run."""
    r = cfg.encoder.resolve_r()
    return dataclasses.replace(
        cfg, encoder=dataclasses.replace(cfg.encoder, r=int(r)))


def train_run(cfg: RunConfig) -> TrainResult:
    """Run the configured training; write metrics CSV and best checkpoint."""
    cfg = _resolved(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / METRICS_FILE
    model_path = out / MODEL_FILE

    train_set, val_set = generate_task(cfg.task, cfg.seed)
    store = init_model(cfg)
    batch_rng = substream(cfg.seed, "batch")
    drop_rng = substream(cfg.seed, "dropout") if cfg.encoder.keep_prob < 1.0 else None
    step_fn = _OPTIMIZERS[cfg.train.optimizer]
    head_keys = ("W1", "b1", "W2", "b2")

    rows = [METRICS_HEADER]
    best_val = evaluate(store, cfg, val_set)
    final_val = best_val
    rows.append(f"0,,{best_val:.4f}")
    save_model(model_path, store, run_config_flat(cfg))

    for step in range(1, cfg.train.steps + 1):
        picks = batch_rng.integers(0, len(train_set), size=cfg.train.batch_size)
        ids, valid = pad_batch([train_set.sequences[i] for i in picks])
        labels = train_set.labels[picks]
        with Graph(np.float32) as g:
            s = encode_batch(g, store, cfg, ids, valid, rng=drop_rng)
            logits = classifier_logits(
                g, s, {k: store.leaf(g, f"head/{k}") for k in head_keys})
            loss = objective(g, cross_entropy(g, logits, labels), store,
                             cfg.train.gamma)
            loss_val = float(g.value(loss))
            if not np.isfinite(loss_val):
                raise TrainingDiverged(step)
            grads = g.backward(loss, wrt=list(g._param_leaves.values()),
                               free_values=True)
            step_fn(store, store.grads_by_path(g, grads))

        if step % cfg.train.eval_every == 0 or step == cfg.train.steps:
            final_val = evaluate(store, cfg, val_set)
            rows.append(f"{step},{loss_val:.6f},{final_val:.4f}")
            if final_val > best_val:
                best_val = final_val
                save_model(model_path, store, run_config_flat(cfg))
        else:
            rows.append(f"{step},{loss_val:.6f},")

    metrics_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return TrainResult(steps_run=cfg.train.steps, best_val=best_val,
                       final_val=final_val, metrics_path=metrics_path,
                       model_path=model_path)


def evaluate_checkpoint(path) -> tuple[float, RunConfig]:
    """Load a container, rebuild its validation split, and score it."""
    store, raw = load_model(path)
    cfg = build_run_config(raw)
    cfg = _resolved(cfg)
    _, val_set = generate_task(cfg.task, cfg.seed)
    return evaluate(store, cfg, val_set), cfg


# ---------------------------------------------------------------------------
# end-to-end gradient check (the whole encoder feeding a two-sentence head)
# ---------------------------------------------------------------------------

def full_model_gradcheck(n: int = 12, d: int = 8, r: int = 2, *,
                         seed: int = 0, paths: tuple[str, ...] | None = None,
                         step: float = 1e-5) -> float:
    """Worst finite-difference relative error through encoder + pair head.

    Uses float64 and no dropout.  ``paths`` picks which parameters to
    perturb; the default covers the embedding, both directions' attention,
    the fusion gate, the pool, and the classifier.
    """
    cfg = build_run_config({
        "task": "copy-class", "classes": 3, "d_e": d, "d_h": d, "r": r,
        "vocab": 12, "mu": float(n), "sigma": 0.0, "seed": seed,
    })
    store = init_model(cfg).astype(np.float64)
    data_rng = substream(seed, "data")
    prem = data_rng.integers(0, cfg.task.vocab, size=(1, n))
    hyp = data_rng.integers(0, cfg.task.vocab, size=(1, n))
    label = np.array([1])

    # the pair head works on [s1; s2; s1-s2; s1*s2], so it needs its own
    # classifier sized for that representation
    nli = ParamStore()
    init_classifier_params(nli, 8 * d, d, cfg.task.classes,
                           substream(seed, "init"), prefix="nli")
    for p, v in nli.values.items():
        store.add(p, v, nli.kinds[p])

    if paths is None:
        paths = ("emb/table", "fw/intra/W1", "bw/inter/b1", "fw/fuse/Wf",
                 "pool/W", "nli/W1")

    worst = 0.0
    for path in paths:
        def build(theta, path=path):
            store.values[path] = theta.reshape(store.values[path].shape)
            g = Graph(np.float64)
            s1 = biblosan_encode(g, prem, store, cfg.encoder)
            s2 = biblosan_encode(g, hyp, store, cfg.encoder)
            logits = classifier_logits(
                g, relation_rep(g, s1, s2),
                {k: store.leaf(g, f"nli/{k}") for k in ("W1", "b1", "W2", "b2")})
            return g, cross_entropy(g, logits, label), store.leaf(g, path)

        worst = max(worst, finite_difference_check(
            build, store.values[path].copy(), step=step))
    return worst
