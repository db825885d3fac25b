"""End-to-end gradient check of the model plus loss."""
from __future__ import annotations

import copy

from .config import model_config
from .data import encode_dialog, overfit_corpus
from .gradcheck import GradCheckReport, grad_check_report
from .model import HiTransformer
from .tokenizer import build_vocab
from .config import tokenizer_config
from .training import class_weights, weighted_ce


def model_grad_check(cfg: dict, variant: str) -> float:
    return model_grad_check_report(cfg, variant).max_rel_err


def model_grad_check_report(cfg: dict, variant: str) -> GradCheckReport:
    """Max relative gradient error of weighted CE through the full forward pass.

    Runs on one dialog of the seeded overfit corpus, in eval mode, with the
    model re-initialised at ``gradcheck.init_std``.
    """
    cfg = copy.deepcopy(cfg)
    cfg["variant"] = variant
    gc = cfg["gradcheck"]
    cfg["model"]["init_std"] = gc["init_std"]
    seed = cfg["seed"]
    corpus = overfit_corpus(seed)
    train = corpus.split("train")
    vocab = build_vocab((u.text for d in train for u in d.utterances), 200)
    mcfg = model_config(cfg, len(vocab), len(corpus.label_set), corpus.s_max)
    model = HiTransformer(mcfg, seed=seed)
    dialog = train[gc["dialog"] % len(train)]
    enc = encode_dialog(dialog, vocab, tokenizer_config(cfg), mcfg.pool_specials)
    golds = corpus.golds(dialog)
    weights = class_weights(train, corpus.label_set)

    def loss():
        _, probs = model.forward(enc, train=False)
        return weighted_ce(probs, golds, weights)[0]

    return grad_check_report(loss, model.parameters(), eps=gc["eps"], samples=gc["samples"], seed=seed)
