"""Acceptance checks, one per criterion.

Under pytest each criterion is a test and a PASS/FAIL line per criterion is
printed in the terminal summary. Run this file directly for the same lines
without pytest.
"""
from __future__ import annotations

import itertools
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from hitrans import config as C
from hitrans import tensor as tn
from hitrans.checkpoint import load_checkpoint
from hitrans.cli import main as cli_main
from hitrans.data import encode_dialog, load_corpus, overfit_corpus, speaker_parity_corpus
from hitrans.metrics import ConfusionMatrix, macro_f1, report, uwa, wa
from hitrans.model import EncodedDialog, HiTransformer, predict_from_logits
from hitrans.tensor import Tensor
from hitrans.tokenizer import build_vocab
from hitrans.training import ClassWeights, evaluate_encoded, train, weighted_ce, weights_from_counts
from hitrans.verify import model_grad_check_report

RESULTS: dict[int, tuple[str, bool, str]] = {}
TITLES = {
    1: "gradient integrity",
    2: "metric oracles",
    3: "loss oracle",
    4: "class-weight oracle",
    5: "overfit",
    6: "speaker sensitivity",
    7: "structural invariants",
    8: "determinism",
}


def check(n, fn):
    try:
        detail = fn()
    except AssertionError as exc:
        RESULTS[n] = (TITLES[n], False, str(exc).splitlines()[0] if str(exc) else "assertion failed")
        raise
    RESULTS[n] = (TITLES[n], True, detail)


def summary_lines() -> list[str]:
    return [f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
            for n, (title, ok, detail) in sorted(RESULTS.items())]


def texts(dialogs):
    return [u.text for d in dialogs for u in d.utterances]


def accuracy(model, corpus, vocab, tok, split):
    dialogs = corpus.split(split)
    enc = [encode_dialog(d, vocab, tok, model.cfg.pool_specials) for d in dialogs]
    cm, _ = evaluate_encoded(model, enc, [corpus.golds(d) for d in dialogs], len(corpus.label_set))
    return wa(cm), cm


# ---------------------------------------------------------------------------


def gradient_integrity():
    cfg = C.resolve()
    t0 = time.perf_counter()
    reports = {v: model_grad_check_report(cfg, v) for v in C.VARIANTS}
    seconds = time.perf_counter() - t0
    for v, r in reports.items():
        assert r.checked == 200, f"{v}: only {r.checked} coordinates compared"
        assert r.max_rel_err < 1e-5, f"{v}: max relative error {r.max_rel_err:.3e} >= 1e-5"
    assert seconds < 60, f"took {seconds:.1f} s"
    errs = ", ".join(f"{v} {r.max_rel_err:.2e}" for v, r in reports.items())
    return f"max rel err {errs} over 200 coords each, {seconds:.1f} s"


def metric_oracles():
    cm = ConfusionMatrix([[2, 1], [1, 3]])
    assert abs(macro_f1(cm) - 17 / 24) < 1e-9, f"macro_f1 {macro_f1(cm)}"
    assert abs(wa(cm) - 5 / 7) < 1e-9, f"wa {wa(cm)}"
    assert abs(uwa(cm) - 17 / 24) < 1e-9, f"uwa {uwa(cm)}"
    for a, b in zip((macro_f1(cm), wa(cm), uwa(cm)), (0.70833, 0.71429, 0.70833)):
        assert round(a, 5) == b
    checked = 0
    for n in (2, 3):
        for cells in itertools.product(range(4), repeat=n * n):
            counts = np.array(cells).reshape(n, n)
            if counts.sum() == 0:
                continue
            assert wa(ConfusionMatrix(counts)) == np.trace(counts) / counts.sum(), f"wa != trace/total on {cells}"
            checked += 1
    return f"0.70833/0.71429/0.70833 within 1e-9; wa == trace/total on {checked} matrices"


def loss_oracle():
    loss, n = weighted_ce(Tensor([[0.5, 0.5]]), [0], ClassWeights((0.25, 0.75), (1, 3)))
    assert n == 1 and abs(loss.item() - 4.0) < 1e-9, f"first example {loss.item()}"
    loss, n = weighted_ce(Tensor([[0.5, 0.5], [0.5, 0.5]]), [0, 1], ClassWeights((0.75, 0.25), (3, 1)))
    mean = loss.item() / n
    assert abs(mean - (1 / 0.75 + 1 / 0.25) / 2) < 1e-9, f"second example {mean}"
    rng = np.random.default_rng(0)
    n_classes = 4
    probs = tn.softmax(Tensor(rng.normal(size=(12, n_classes)))).data
    golds = list(rng.integers(0, n_classes, size=12))
    weighted, count = weighted_ce(Tensor(probs), golds, weights_from_counts([9] * n_classes))
    plain, _ = weighted_ce(Tensor(probs), golds, ClassWeights((1.0,) * n_classes, (1,) * n_classes))
    assert weighted.item() / count == n_classes * (plain.item() / count), "equifrequent identity not exact"
    reference = -np.mean(np.log2(probs[np.arange(12), golds]))
    assert math.isclose(plain.item() / count, reference, rel_tol=1e-14)
    return f"4.0 and {mean:.4f} within 1e-9; equifrequent weighted == |C| x mean CE bitwise"


def class_weight_oracle():
    w = weights_from_counts([756, 1710, 498, 6530], ["anger", "joy", "sadness", "neutral"])
    want = (0.07963, 0.18011, 0.05245, 0.68780)
    worst = max(abs(a - b) for a, b in zip(w.weights, want))
    assert worst <= 5e-6, f"max deviation {worst:.2e}"
    return f"({', '.join(f'{x:.5f}' for x in w.weights)}), max deviation {worst:.1e}"


def overfit():
    corpus = overfit_corpus(0)
    train_split = corpus.split("train")
    assert len(train_split) == 32 and all(4 <= len(d) <= 8 for d in train_split)
    cfg = C.resolve(sets=["train.epochs=300", "train.target_train_accuracy=0.95", "train.min_epochs=5"])
    assert cfg["preset"] == "tiny" and cfg["train"]["learning_rate"] == 1e-3
    vocab = build_vocab(texts(train_split), cfg["vocab_size"])
    mcfg = C.model_config(cfg, len(vocab), len(corpus.label_set), corpus.s_max)
    t0 = time.perf_counter()
    res = train(corpus, vocab, mcfg, C.train_config(cfg), C.tokenizer_config(cfg))
    seconds = time.perf_counter() - t0
    losses = [r["mean_train_loss"] for r in res.log[:5]]
    assert len(losses) == 5, "fewer than 5 epochs ran"
    assert all(b < a for a, b in zip(losses, losses[1:])), f"loss not strictly decreasing: {losses}"
    acc = res.log[-1]["train_accuracy"]
    assert acc >= 0.95, f"train accuracy {acc:.3f} after {len(res.log)} epochs"
    assert seconds < 300, f"took {seconds:.0f} s"
    return (f"vocab {len(vocab)}, train acc {acc:.3f} at epoch {len(res.log)}, "
            f"first 5 losses {' > '.join(f'{x:.3f}' for x in losses)}, {seconds:.1f} s")


def speaker_sensitivity():
    corpus = speaker_parity_corpus(0)
    base_cfg = C.resolve(sets=["train.epochs=30"])
    vocab = build_vocab(texts(corpus.split("train")), base_cfg["vocab_size"])
    tok = C.tokenizer_config(base_cfg)
    accs, models = {}, {}
    for variant in C.VARIANTS:
        cfg = C.resolve(sets=["train.epochs=30"], flags={"variant": variant})
        mcfg = C.model_config(cfg, len(vocab), len(corpus.label_set), corpus.s_max)
        models[variant] = train(corpus, vocab, mcfg, C.train_config(cfg), tok).model
        accs[variant], cm = accuracy(models[variant], corpus, vocab, tok, "test")
    support = cm.counts.sum(axis=1)
    majority = support.max() / support.sum()
    assert accs["speaker"] >= 0.90, f"speaker variant test accuracy {accs['speaker']:.3f} < 0.90"
    assert accs["base"] <= majority + 0.05, f"base {accs['base']:.3f} > majority {majority:.3f} + 0.05"

    base = models["base"]
    rng = np.random.default_rng(1)
    pool = [f"person{i}" for i in range(6)]
    compared = 0
    for d in corpus.split("test")[:25]:
        enc = encode_dialog(d, vocab, tok, base.cfg.pool_specials)
        renamed = EncodedDialog(enc.ids, enc.masks, [str(s) for s in rng.choice(pool, size=len(d))])
        with tn.no_grad():
            same = np.array_equal(base.forward(enc)[0].data, base.forward(renamed)[0].data)
        assert same, "base logits changed when only speakers changed"
        compared += 1
    return (f"test acc speaker {accs['speaker']:.3f} (>= 0.90), base {accs['base']:.3f} "
            f"(<= majority {majority:.3f} + 0.05); base logits bitwise equal on {compared} re-speakered dialogs")


def structural_invariants():
    corpus = overfit_corpus(0)
    cfg = C.resolve(flags={"variant": "speaker"})
    vocab = build_vocab(texts(corpus.split("train")), cfg["vocab_size"])
    mcfg = C.model_config(cfg, len(vocab), len(corpus.label_set), corpus.s_max)
    model = HiTransformer(mcfg, seed=0)
    tok = C.tokenizer_config(cfg)
    layers, worst = 0, 0.0
    for d in corpus.split("val"):
        attn = []
        with tn.no_grad():
            model.forward(encode_dialog(d, vocab, tok), attn_out=attn)
        assert len(attn) == mcfg.lower.n_layers + mcfg.upper.n_layers
        for w in attn:
            assert (w >= 0).all()
            worst = max(worst, float(np.abs(w.sum(axis=-1) - 1).max()))
        layers += len(attn)
    assert worst < 1e-9, f"attention row sum off by {worst:.2e}"

    upper = model.upper
    assert upper.cfg.positional_kind == "none"
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(1, 15))
        x = rng.normal(size=(n, upper.cfg.d_model))
        perm = rng.permutation(n)
        with tn.no_grad():
            a = upper.encode(Tensor(x)).data[perm]
            b = upper.encode(Tensor(x[perm])).data
        assert np.array_equal(a, b), f"upper encoder not exactly equivariant (trial {trial})"

    shifts = 0
    for d in corpus.split("val"):
        with tn.no_grad():
            logits = model.forward(encode_dialog(d, vocab, tok))[0].data
        want = model.predict(encode_dialog(d, vocab, tok))
        for c in (-1000.0, -3.5, 0.0, 0.125, 7.0, 1000.0):
            assert predict_from_logits(logits + c) == want, f"prediction moved under shift {c}"
            assert predict_from_logits(tn.softmax(Tensor(logits + c)).data) == want
            shifts += 1
    return (f"{layers} attention maps, max |row sum - 1| {worst:.1e}; upper encoder bitwise equivariant "
            f"on 20 permutations; predict unchanged under {shifts} logit shifts")


def determinism():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        assert cli_main(["synth", "--out", str(root / "syn"), "--set", "synth.kind=overfit"]) == 0
        data = [f"--set=data.{s}={root / 'syn' / (s + '.jsonl')}" for s in ("train", "val", "test")]
        args = data + ["--set=train.epochs=3", "--seed=7"]
        for name in ("a", "b"):
            assert cli_main(["train", *args, "--checkpoint", str(root / name), "--out", str(root / f"{name}.log")]) == 0
        files = sorted(p.name for p in (root / "a").iterdir())
        for f in files:
            assert (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes(), f"{f} differs between runs"

        cfg = C.resolve(sets=[a.split("=", 1)[1] for a in args if a.startswith("--set=")], flags={"seed": 7})
        corpus = load_corpus({s: cfg["data"][s] for s in ("train", "val", "test")}, cfg["labels"])
        vocab = build_vocab(texts(corpus.split("train")), cfg["vocab_size"])
        mcfg = C.model_config(cfg, len(vocab), len(corpus.label_set), corpus.s_max)
        res = train(corpus, vocab, mcfg, C.train_config(cfg), C.tokenizer_config(cfg))
        _, cm = accuracy(res.model, corpus, vocab, C.tokenizer_config(cfg), "test")
        in_memory = report(cm, corpus.label_set)

        ck = load_checkpoint(root / "a", corpus.label_set)
        for name, p in res.model.named_parameters():
            assert np.array_equal(p.data, dict(ck.model.named_parameters())[name].data), f"{name} differs"
        assert cli_main(["eval", *data, "--checkpoint", str(root / "a"), "--out", str(root / "rep.json")]) == 0
        loaded = json.loads((root / "rep.json").read_text())
        for key in ("macro_f1", "wa", "uwa", "confusion", "per_class"):
            assert loaded[key] == in_memory[key], f"{key} differs after save/load"
    return (f"two seeded train runs gave byte-identical {', '.join(files)}; "
            f"save -> load -> eval reproduced macro_f1 {in_memory['macro_f1']!r} bitwise")


CRITERIA = {
    1: gradient_integrity,
    2: metric_oracles,
    3: loss_oracle,
    4: class_weight_oracle,
    5: overfit,
    6: speaker_sensitivity,
    7: structural_invariants,
    8: determinism,
}


@pytest.mark.parametrize("n", sorted(CRITERIA), ids=[f"{n}-{TITLES[n].replace(' ', '-')}" for n in sorted(CRITERIA)])
def test_criterion(n):
    check(n, CRITERIA[n])


if __name__ == "__main__":
    for n, fn in sorted(CRITERIA.items()):
        try:
            check(n, fn)
        except AssertionError:
            pass
        title, ok, detail = RESULTS[n]
        print(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}", flush=True)
    sys.exit(0 if all(ok for _, ok, _ in RESULTS.values()) else 1)
