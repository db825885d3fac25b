"""``hitrans`` command line: build-vocab, stats, train, eval, predict, gradcheck, synth."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as C
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SPLITS, Corpus, encode_dialog, format_stats, corpus_stats, load_corpus, overfit_corpus,
                   read_dialogs, resolve_label_set, save_corpus, speaker_parity_corpus)
from .errors import ConfigError, HiTransError
from .metrics import report
from .tokenizer import Vocab, build_vocab
from .training import evaluate_encoded, log_line, train
from .verify import model_grad_check_report

COMMANDS = ("build-vocab", "stats", "train", "eval", "predict", "gradcheck", "synth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hitrans", description="Hierarchical transformer emotion tagger")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted key, JSON value); repeatable")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--preset", choices=sorted(C.PRESETS))
    parser.add_argument("--variant", choices=C.VARIANTS)
    parser.add_argument("--split", choices=SPLITS)
    parser.add_argument("--checkpoint")
    parser.add_argument("--out")
    return parser


def _need(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"{key!r} is required for this command")
    return cfg[key]


def _corpus(cfg: dict, splits=SPLITS) -> Corpus:
    paths = {s: cfg["data"][s] for s in splits if cfg["data"].get(s)}
    if not paths:
        raise ConfigError("no corpus files configured (data.train / data.val / data.test)")
    return load_corpus(paths, cfg["labels"], cfg["drop_out_of_set"])


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_build_vocab(cfg: dict) -> int:
    out = _need(cfg, "out") if cfg.get("out") else _need(cfg, "vocab")
    dialogs = read_dialogs(_need(cfg["data"], "train"))
    vocab = build_vocab((u.text for d in dialogs for u in d.utterances), cfg["vocab_size"], cfg["min_freq"],
                        cfg["tokenizer"]["lowercase"])
    vocab.save(out)
    print(json.dumps({"vocab": str(out), "size": len(vocab)}))
    return 0


def cmd_stats(cfg: dict) -> int:
    stats = corpus_stats(_corpus(cfg))
    print(format_stats(stats))
    if cfg.get("out"):
        Path(cfg["out"]).write_text(json.dumps(stats, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_train(cfg: dict) -> int:
    ckpt = _need(cfg, "checkpoint")
    corpus = _corpus(cfg)
    if cfg.get("vocab") and Path(cfg["vocab"]).exists():
        vocab = Vocab.load(cfg["vocab"])
    else:
        texts = (u.text for d in corpus.split("train") for u in d.utterances)
        vocab = build_vocab(texts, cfg["vocab_size"], cfg["min_freq"], cfg["tokenizer"]["lowercase"])
    mcfg = C.model_config(cfg, len(vocab), len(corpus.label_set), corpus.s_max)
    tcfg = C.train_config(cfg)
    log_fh = open(cfg["out"], "w", encoding="utf-8") if cfg.get("out") else None
    try:
        def on_epoch(record):
            line = log_line(record)
            print(line, flush=True)
            if log_fh:
                log_fh.write(line + "\n")

        result = train(corpus, vocab, mcfg, tcfg, C.tokenizer_config(cfg), on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(ckpt, result.model, vocab, corpus.label_set, C.tokenizer_config(cfg),
                    extra={"best_epoch": result.best_epoch, "steps": result.steps, "seed": cfg["seed"]})
    print(json.dumps({"checkpoint": str(ckpt), "best_epoch": result.best_epoch, "steps": result.steps}))
    return 0


def _load_for(cfg: dict):
    labels = resolve_label_set(cfg["labels"])
    return load_checkpoint(_need(cfg, "checkpoint"), labels)


def cmd_eval(cfg: dict) -> int:
    ck = _load_for(cfg)
    split = cfg["split"]
    corpus = _corpus(cfg, (split,))
    dialogs = corpus.split(split)
    enc = [encode_dialog(d, ck.vocab, ck.tokenizer, ck.model.cfg.pool_specials) for d in dialogs]
    golds = [corpus.golds(d) for d in dialogs]
    cm, _ = evaluate_encoded(ck.model, enc, golds, len(ck.label_set))
    masked = sum(g.count(-1) for g in golds)
    rep = report(cm, ck.label_set, masked, cfg["uwa_present_only"])
    rep["split"] = split
    _emit(rep, cfg.get("out"))
    return 0


def cmd_predict(cfg: dict) -> int:
    ck = _load_for(cfg)
    split = cfg["split"]
    dialogs = read_dialogs(_need(cfg["data"], split))
    enc = [encode_dialog(d, ck.vocab, ck.tokenizer, ck.model.cfg.pool_specials) for d in dialogs]
    _, preds = evaluate_encoded(ck.model, enc, [[-1] * len(d) for d in dialogs], len(ck.label_set))
    lines = []
    for d, p in zip(dialogs, preds):
        obj = d.to_json()
        for u, label in zip(obj["utterances"], p):
            u["predicted"] = ck.label_set[label]
        lines.append(json.dumps(obj, ensure_ascii=False))
    text = "\n".join(lines) + "\n"
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    tol = cfg["gradcheck"]["tolerance"]
    reports = {v: model_grad_check_report(cfg, v) for v in C.VARIANTS}
    ok = all(r.max_rel_err < tol for r in reports.values())
    _emit({"max_rel_err": {v: r.max_rel_err for v, r in reports.items()},
           "checked": {v: r.checked for v, r in reports.items()},
           "skipped_kinks": {v: r.skipped_kinks for v, r in reports.items()},
           "tolerance": tol, "pass": ok}, cfg.get("out"))
    return 0 if ok else 1


def cmd_synth(cfg: dict) -> int:
    out = Path(_need(cfg, "out"))
    s = cfg["synth"]
    sizes = {k: s[k] for k in ("n_train", "n_val", "n_test") if s[k] is not None}
    makers = {"overfit": overfit_corpus, "parity": speaker_parity_corpus}
    kinds = list(makers) if s["kind"] == "all" else [s["kind"]]
    written = {}
    for kind in kinds:
        if kind not in makers:
            raise ConfigError(f"synth.kind must be overfit, parity or all, got {kind!r}")
        target = out / kind if len(kinds) > 1 else out
        paths = save_corpus(makers[kind](cfg["seed"], **sizes), target)
        written[kind] = {k: str(v) for k, v in paths.items()}
    print(json.dumps(written))
    return 0


HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.resolve(args.config, args.set, {
            "seed": args.seed, "preset": args.preset, "variant": args.variant,
            "split": args.split, "checkpoint": args.checkpoint, "out": args.out,
        })
        return HANDLERS[args.command](cfg)
    except (HiTransError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
