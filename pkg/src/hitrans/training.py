"""Weighted cross-entropy, Adam, and the one-dialog-per-step training loop."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .data import Corpus, Dialog, encode_dialog
from .errors import ConfigError, TrainingError, VocabIndexError
from .metrics import MASKED, ConfusionMatrix, confusion, macro_f1, uwa, wa
from .model import EncodedDialog, HiTransformer, HiTransformerConfig, predict_from_logits
from .tensor import Tensor
from .tokenizer import TokenizerConfig, Vocab

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]
    counts: tuple[int, ...]

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / np.asarray(self.weights)


def class_weights(dialogs: Sequence[Dialog], label_set: Sequence[str]) -> ClassWeights:
    """Training-split class shares ``a_c / sum(a)``; masked labels are not counted."""
    counts = {c: 0 for c in label_set}
    for d in dialogs:
        for u in d.utterances:
            if u.label in counts:
                counts[u.label] += 1
    return weights_from_counts([counts[c] for c in label_set], label_set)


def weights_from_counts(counts: Sequence[int], label_set: Sequence[str] | None = None) -> ClassWeights:
    names = list(label_set) if label_set is not None else [str(i) for i in range(len(counts))]
    empty = [n for n, a in zip(names, counts) if a == 0]
    if empty:
        raise ConfigError(
            f"classes {empty} never occur in the training split; their weights would be zero. "
            "Shrink the label set or add training data.")
    total = sum(counts)
    return ClassWeights(tuple(a / total for a in counts), tuple(int(a) for a in counts))


def weighted_ce(probs: Tensor, golds: Sequence[int], weights: ClassWeights,
                log_base: float = 2.0) -> tuple[Tensor, int]:
    """Summed ``(1 / w_c) * -log(p_c)`` over unmasked utterances, and their count.

    Divide the summed contributions of all dialogs by the summed counts to get
    the epoch loss. ``log_base`` is 2 by default; pass ``math.e`` for nats.
    """
    n_classes = probs.shape[-1]
    golds = np.asarray(golds, dtype=np.int64)
    if golds.shape != (probs.shape[0],):
        raise VocabIndexError(f"{golds.shape[0]} gold labels for {probs.shape[0]} utterances")
    bad = (golds < MASKED) | (golds >= n_classes)
    if bad.any():
        raise VocabIndexError(f"gold index {int(golds[bad][0])} outside [0, {n_classes})")
    rows = np.flatnonzero(golds != MASKED)
    if rows.size == 0:
        return Tensor(0.0), 0
    cols = golds[rows]
    coef = -weights.inverse[cols] / math.log(log_base)
    logp = tn.log(tn.pick(probs, rows, cols), PROB_FLOOR)
    return tn.total(tn.mul(logp, Tensor(coef))), int(rows.size)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    freeze_lower: bool = False
    log_base: str = "2"
    target_train_accuracy: float | None = None
    min_epochs: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.log_base not in ("2", "e"):
            raise ConfigError(f"log_base must be '2' or 'e', got {self.log_base!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigError("adam betas must be in [0, 1) and eps > 0")

    @property
    def log_base_value(self) -> float:
        return 2.0 if self.log_base == "2" else math.e


FULL_SIZE_LEARNING_RATE = 1e-5


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(named_params: Sequence[tuple[str, Tensor]], state: AdamState, cfg: TrainConfig,
              frozen: frozenset[str] | set[str] = frozenset()) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    live = [(n, p) for n, p in named_params if n not in frozen]
    for name, p in live:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in live:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HITRANS_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_encoded(model: HiTransformer, encoded: Sequence[EncodedDialog], golds: Sequence[Sequence[int]],
                     n_classes: int, threads: int | None = None) -> tuple[ConfusionMatrix, list[list[int]]]:
    """Eval-mode predictions and the merged confusion matrix."""
    threads = threads or _threads()
    if threads > 1 and len(encoded) > 1:
        with ThreadPoolExecutor(threads) as pool:
            preds = list(pool.map(model.predict, encoded))
    else:
        preds = [model.predict(d) for d in encoded]
    cm = ConfusionMatrix.zeros(n_classes)
    for p, g in zip(preds, golds):
        cm = cm + confusion(p, g, n_classes)
    return cm, preds


@dataclass
class TrainResult:
    model: HiTransformer
    best_state: dict[str, np.ndarray]
    best_epoch: int
    log: list[dict]
    weights: ClassWeights
    steps: int
    last_state: dict[str, np.ndarray]


def train(corpus: Corpus, vocab: Vocab, model_cfg: HiTransformerConfig, train_cfg: TrainConfig,
          tok_cfg: TokenizerConfig = TokenizerConfig(),
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with one dialog per Adam step; keep the best-validation-macro-F1 weights.

    The returned model holds the best weights. ``on_epoch`` receives each log
    record as it is produced.
    """
    train_dialogs = corpus.split("train")
    val_dialogs = corpus.split("val")
    if not train_dialogs:
        raise TrainingError("the training split is empty")
    if not val_dialogs:
        raise TrainingError("a validation split is required for model selection")
    if model_cfg.n_classes != len(corpus.label_set):
        raise ConfigError(f"model has {model_cfg.n_classes} classes, corpus has {len(corpus.label_set)}")
    weights = class_weights(train_dialogs, corpus.label_set)

    def prep(dialogs):
        return ([encode_dialog(d, vocab, tok_cfg, model_cfg.pool_specials) for d in dialogs],
                [corpus.golds(d) for d in dialogs])

    tr_enc, tr_gold = prep(train_dialogs)
    va_enc, va_gold = prep(val_dialogs)

    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    model = HiTransformer(model_cfg, seed=train_cfg.seed)
    named = model.named_parameters()
    params = [p for _, p in named]
    frozen = model.lower_parameter_names() if train_cfg.freeze_lower else set()
    state = AdamState()
    base = train_cfg.log_base_value
    n_classes = model_cfg.n_classes

    log: list[dict] = []
    best_f1, best_epoch, best_state = -1.0, 0, model.state_dict()
    steps = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, count = 0.0, 0
        for idx in order_rng.permutation(len(tr_enc)):
            _, probs = model.forward(tr_enc[idx], train=True, rng=drop_rng,
                                     freeze_lower=train_cfg.freeze_lower)
            loss, n = weighted_ce(probs, tr_gold[idx], weights, base)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, dialog {int(idx)}")
            tn.zero_grads(params)
            if loss.requires_grad:
                tn.backward(loss)
            adam_step(named, state, train_cfg, frozen)
            tn.zero_grads(params)
            steps += 1
            loss_sum += value
            count += n
        cm, _ = evaluate_encoded(model, va_enc, va_gold, n_classes)
        record = {
            "epoch": epoch,
            "mean_train_loss": loss_sum / count if count else 0.0,
            "val_macro_f1": macro_f1(cm),
            "val_wa": wa(cm) if cm.total else None,
            "val_uwa": uwa(cm) if cm.total else None,
        }
        stop = False
        if train_cfg.target_train_accuracy is not None:
            tcm, _ = evaluate_encoded(model, tr_enc, tr_gold, n_classes)
            record["train_accuracy"] = wa(tcm) if tcm.total else 0.0
            stop = (record["train_accuracy"] >= train_cfg.target_train_accuracy
                    and epoch >= train_cfg.min_epochs)
        record["seconds"] = time.perf_counter() - t0
        if record["val_macro_f1"] > best_f1:
            best_f1, best_epoch, best_state = record["val_macro_f1"], epoch, model.state_dict()
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stop:
            break
    last_state = model.state_dict()
    model.load_state_dict(best_state)
    return TrainResult(model, best_state, best_epoch, log, weights, steps, last_state)


def log_line(record: Mapping) -> str:
    return json.dumps(dict(record), sort_keys=False)
