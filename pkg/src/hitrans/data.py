"""Dialog corpora: JSON-lines I/O, label masking, statistics, synthetic sets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError
from .model import EncodedDialog
from .tokenizer import TokenizerConfig, Vocab, encode

SPLITS = ("train", "val", "test")

LABEL_PRESETS: dict[str, tuple[str, ...]] = {
    "friends4": ("anger", "joy", "sadness", "neutral"),
    "emotionpush4": ("anger", "joy", "sadness", "neutral"),
    "emorynlp7": ("neutral", "joyful", "peaceful", "powerful", "scared", "mad", "sad"),
    "parity2": ("same_speaker", "new_speaker"),
}


@dataclass(frozen=True)
class Utterance:
    text: str
    speaker: str
    label: str | None = None


@dataclass(frozen=True)
class Dialog:
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise SchemaError("a dialog needs at least one utterance")
        for u in self.utterances:
            if not u.speaker:
                raise SchemaError("speaker names must be non-empty")

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def texts(self) -> list[str]:
        return [u.text for u in self.utterances]

    @property
    def speakers(self) -> list[str]:
        return [u.speaker for u in self.utterances]

    def n_speakers(self) -> int:
        return len(set(self.speakers))

    def to_json(self) -> dict:
        utts = []
        for u in self.utterances:
            d = {"text": u.text, "speaker": u.speaker}
            if u.label is not None:
                d["label"] = u.label
            utts.append(d)
        return {"utterances": utts}

    @classmethod
    def from_json(cls, obj) -> Dialog:
        if not isinstance(obj, dict) or not isinstance(obj.get("utterances"), list):
            raise SchemaError('expected {"utterances": [...]}')
        utts = []
        for u in obj["utterances"]:
            if not isinstance(u, dict) or not isinstance(u.get("text"), str) or not isinstance(u.get("speaker"), str):
                raise SchemaError("each utterance needs string 'text' and 'speaker'")
            label = u.get("label")
            if label is not None and not isinstance(label, str):
                raise SchemaError("'label' must be a string when present")
            utts.append(Utterance(u["text"], u["speaker"], label))
        return cls(tuple(utts))


@dataclass(frozen=True)
class Corpus:
    splits: Mapping[str, tuple[Dialog, ...]]
    label_set: tuple[str, ...]
    s_max: int = field(init=False)

    def __post_init__(self):
        counts = [d.n_speakers() for ds in self.splits.values() for d in ds]
        object.__setattr__(self, "s_max", max(counts, default=1))

    def split(self, name: str) -> tuple[Dialog, ...]:
        return self.splits.get(name, ())

    def label_index(self, label: str | None) -> int:
        """Class index, or -1 for a masked (absent or out-of-set) label."""
        if label is None or label not in self.label_set:
            return -1
        return self.label_set.index(label)

    def golds(self, dialog: Dialog) -> list[int]:
        return [self.label_index(u.label) for u in dialog.utterances]


def resolve_label_set(spec: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(spec, str):
        if spec not in LABEL_PRESETS:
            raise SchemaError(f"unknown label preset {spec!r}; known: {sorted(LABEL_PRESETS)}")
        return LABEL_PRESETS[spec]
    labels = tuple(spec)
    if not labels or len(set(labels)) != len(labels):
        raise SchemaError("label set must be non-empty with unique names")
    return labels


def read_dialogs(path) -> list[Dialog]:
    dialogs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from exc
            try:
                dialogs.append(Dialog.from_json(obj))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return dialogs


def write_dialogs(dialogs: Iterable[Dialog], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogs:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")


def load_corpus(paths: Mapping[str, str | Path], label_set, drop_out_of_set: bool = False) -> Corpus:
    """Read one JSON-lines file per split.

    Labels outside ``label_set`` stay as context and are masked from loss
    and metrics. With ``drop_out_of_set`` those utterances are removed
    instead (dialogs left empty are dropped).
    """
    labels = resolve_label_set(label_set)
    splits = {}
    for name, path in paths.items():
        if name not in SPLITS:
            raise SchemaError(f"unknown split {name!r}")
        dialogs = read_dialogs(path)
        if drop_out_of_set:
            kept = []
            for d in dialogs:
                utts = tuple(u for u in d.utterances if u.label in labels)
                if utts:
                    kept.append(Dialog(utts))
            dialogs = kept
        splits[name] = tuple(dialogs)
    return Corpus(splits, labels)


def save_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, dialogs in corpus.splits.items():
        out[name] = directory / f"{name}.jsonl"
        write_dialogs(dialogs, out[name])
    return out


def corpus_stats(corpus: Corpus) -> dict:
    """Per-split ``#dialog(#utterance)`` plus per-class and masked counts."""
    splits = {}
    classes = {c: 0 for c in corpus.label_set}
    masked = 0
    for name in SPLITS:
        if name not in corpus.splits:
            continue
        dialogs = corpus.splits[name]
        n_utt = sum(len(d) for d in dialogs)
        per = {c: 0 for c in corpus.label_set}
        split_masked = 0
        for d in dialogs:
            for u in d.utterances:
                if u.label in per:
                    per[u.label] += 1
                else:
                    split_masked += 1
        for c, n in per.items():
            classes[c] += n
        masked += split_masked
        splits[name] = {"dialogs": len(dialogs), "utterances": n_utt, "cell": f"{len(dialogs)}({n_utt})",
                        "classes": per, "masked": split_masked}
    total = sum(s["utterances"] for s in splits.values())
    return {"splits": splits, "classes": classes, "masked": masked, "utterances": total, "s_max": corpus.s_max}


def format_stats(stats: dict) -> str:
    names = list(stats["splits"])
    classes = list(stats["classes"])
    header = names + classes + ["masked"]
    row = [stats["splits"][n]["cell"] for n in names] + [str(stats["classes"][c]) for c in classes]
    row.append(str(stats["masked"]))
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    fmt = "  ".join("{:>%d}" % w for w in widths)
    return fmt.format(*header) + "\n" + fmt.format(*row)


def encode_dialog(dialog: Dialog, vocab: Vocab, cfg: TokenizerConfig, pool_specials: bool = True) -> EncodedDialog:
    encs = [encode(u.text, vocab, cfg, pool_specials) for u in dialog.utterances]
    return EncodedDialog([e.ids for e in encs], [e.mask for e in encs], dialog.speakers)


# ---------------------------------------------------------------------------
# synthetic corpora

_NAMES = ("ross", "rachel", "monica", "chandler", "joey", "phoebe", "gunther", "janice",
          "carol", "susan", "mike", "emily")

_KEYWORDS = {
    "anger": ("furious", "hate", "annoyed", "outraged", "stupid", "yell", "mad", "angry"),
    "joy": ("great", "love", "happy", "awesome", "wonderful", "yay", "fun", "glad"),
    "sadness": ("sad", "miss", "cry", "sorry", "lonely", "lost", "tears", "hurt"),
    "neutral": ("okay", "table", "coffee", "tuesday", "apartment", "maybe", "later", "phone"),
}

_FILLER = ("i", "you", "we", "it", "is", "was", "so", "the", "a", "that", "this", "just",
           "really", "oh", "well", "my", "your", "now", "here", "there", "today", "all")


def overfit_corpus(seed: int = 0, n_train: int = 32, n_val: int = 8, n_test: int = 8,
                   min_utts: int = 4, max_utts: int = 8) -> Corpus:
    """Keyword-driven four-class dialogs with a ~60-word vocabulary.

    Every utterance carries exactly one keyword of its class among filler
    words, so a model can fit the training split perfectly.
    """
    rng = np.random.default_rng(seed)
    labels = LABEL_PRESETS["friends4"]
    priors = np.array([0.2, 0.25, 0.15, 0.4])

    def make(n):
        dialogs = []
        for _ in range(n):
            k = int(rng.integers(min_utts, max_utts + 1))
            cast = list(rng.choice(_NAMES, size=int(rng.integers(2, 5)), replace=False))
            utts = []
            for _ in range(k):
                label = labels[int(rng.choice(len(labels), p=priors))]
                words = list(rng.choice(_FILLER, size=int(rng.integers(2, 6))))
                words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(_KEYWORDS[label])))
                text = " ".join(words) + str(rng.choice([".", "!", "?"]))
                utts.append(Utterance(text, str(rng.choice(cast)), label))
            dialogs.append(Dialog(tuple(utts)))
        return tuple(dialogs)

    return Corpus({"train": make(n_train), "val": make(n_val), "test": make(n_test)}, labels)


PARITY_TEXT = "Yes, I agree. I think so, too."


def speaker_parity_corpus(seed: int = 0, n_train: int = 200, n_val: int = 40, n_test: int = 100,
                          min_utts: int = 4, max_utts: int = 8, n_speakers: int = 3) -> Corpus:
    """Identical utterance texts; the label says whether the speaker changed.

    Each dialog draws ``n_speakers`` names from a pool. The first utterance
    is unlabelled (masked); later ones are ``same_speaker`` or
    ``new_speaker`` with equal probability.
    """
    rng = np.random.default_rng(seed)
    labels = LABEL_PRESETS["parity2"]

    def make(n):
        dialogs = []
        for _ in range(n):
            k = int(rng.integers(min_utts, max_utts + 1))
            cast = [str(s) for s in rng.choice(_NAMES, size=n_speakers, replace=False)]
            speaker = cast[0]
            utts = [Utterance(PARITY_TEXT, speaker, None)]
            for _ in range(k - 1):
                if rng.random() < 0.5:
                    label = labels[0]
                else:
                    others = [s for s in cast if s != speaker]
                    speaker = others[int(rng.integers(len(others)))]
                    label = labels[1]
                utts.append(Utterance(PARITY_TEXT, speaker, label))
            dialogs.append(Dialog(tuple(utts)))
        return tuple(dialogs)

    return Corpus({"train": make(n_train), "val": make(n_val), "test": make(n_test)}, labels)
