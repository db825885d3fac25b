"""Checkpoint directories: JSON manifest, one float64 blob, vocab file.

Layout::

    <ckpt>/manifest.json   config, labels, hashes, {name, shape, offset} per tensor
    <ckpt>/weights.bin     raw little-endian float64, tensors back to back
    <ckpt>/vocab.txt       one token per line

Writes go to a sibling temp directory that is renamed into place, so a
crash never leaves a half-written checkpoint behind.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CompatibilityError
from .model import HiTransformer, HiTransformerConfig
from .tokenizer import TokenizerConfig, Vocab

FORMAT = "hitrans-checkpoint"
VERSION = 1
_LE_F8 = np.dtype("<f8")


def config_hash(model_cfg: HiTransformerConfig, label_set) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "labels": list(label_set)}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    model: HiTransformer
    vocab: Vocab
    label_set: tuple[str, ...]
    tokenizer: TokenizerConfig
    manifest: dict


def save_checkpoint(path, model: HiTransformer, vocab: Vocab, label_set, tokenizer: TokenizerConfig,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    names, blobs, entries = [], [], []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=_LE_F8).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        names.append(name)
        offset += len(raw)
    weights = b"".join(blobs)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "<f8",
        "model_config": model.cfg.to_dict(),
        "tokenizer_config": asdict(tokenizer),
        "label_set": list(label_set),
        "config_hash": config_hash(model.cfg, label_set),
        "vocab_sha256": vocab.digest(),
        "weights_sha256": hashlib.sha256(weights).hexdigest(),
        "weights_bytes": len(weights),
        "tensors": entries,
        "extra": extra or {},
    }
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / "weights.bin").write_bytes(weights)
    vocab.save(tmp / "vocab.txt")
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    old = None
    if path.exists():
        old = path.with_name(f".{path.name}.old-{os.getpid()}")
        os.replace(path, old)
    os.replace(tmp, path)
    if old is not None:
        shutil.rmtree(old)
    return path


def load_checkpoint(path, label_set=None) -> Checkpoint:
    """Load a checkpoint; with ``label_set`` given, refuse a mismatching one."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CompatibilityError(f"{path} is not a checkpoint directory") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CompatibilityError(
            f"unsupported checkpoint format {manifest.get('format')!r} v{manifest.get('version')}; expected {FORMAT} v{VERSION}")
    cfg = HiTransformerConfig.from_dict(manifest["model_config"])
    labels = tuple(manifest["label_set"])
    if config_hash(cfg, labels) != manifest["config_hash"]:
        raise CompatibilityError("checkpoint manifest is inconsistent with its config hash")
    if label_set is not None and tuple(label_set) != labels:
        raise CompatibilityError(f"checkpoint labels {list(labels)} do not match corpus labels {list(label_set)}")
    vocab = Vocab.load(path / "vocab.txt")
    if vocab.digest() != manifest["vocab_sha256"]:
        raise CompatibilityError("vocab.txt does not match the checkpoint's vocab hash")
    weights = (path / "weights.bin").read_bytes()
    if hashlib.sha256(weights).hexdigest() != manifest["weights_sha256"]:
        raise CompatibilityError("weights.bin does not match the checkpoint's weight hash")
    state = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(weights, dtype=_LE_F8, count=count, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(shape).astype(np.float64)
    model = HiTransformer(cfg, seed=0)
    model.load_state_dict(state)
    return Checkpoint(model, vocab, labels, TokenizerConfig(**manifest["tokenizer_config"]), manifest)
