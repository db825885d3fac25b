"""HiTransformer and its speaker-aware variant.

Each utterance is embedded (token + learned position), encoded by the
lower stack and max-pooled to one vector. The dialog's utterance vectors
get an utterance-position signal, optionally a per-dialog speaker one-hot
is appended, and the upper stack contextualises them. A two-layer SELU
classifier maps each contextual vector to emotion logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as tn
from .encoder import EncoderConfig, EncoderStack, init_const, init_normal, sinusoidal_positions
from .errors import CapacityError, ConfigError, ContractError, LengthError
from .tensor import Tensor
from .tokenizer import PAD_ID


@dataclass(frozen=True)
class HiTransformerConfig:
    lower: EncoderConfig = field(default_factory=EncoderConfig)
    upper: EncoderConfig = field(default_factory=lambda: EncoderConfig(positional_kind="sinusoidal"))
    vocab_size: int = 64
    n_classes: int = 4
    classifier_hidden: int = 300
    classifier_dropout: float = 0.5
    speaker_variant: bool = False
    s_max: int = 1
    pool_specials: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.lower.positional_kind != "learned":
            raise ConfigError("the lower encoder uses learned positions")
        want = self.lower.d_model + (self.s_max if self.speaker_variant else 0)
        if self.upper.d_model != want:
            raise ConfigError(
                f"upper d_model must be {want} (lower {self.lower.d_model}"
                f"{' + s_max ' + str(self.s_max) if self.speaker_variant else ''}), got {self.upper.d_model}")
        if self.upper.positional_kind == "sinusoidal" and self.lower.d_model % 2:
            raise ConfigError("sinusoidal utterance positions need an even lower d_model")
        if self.s_max < 1 or self.n_classes < 1 or self.vocab_size < 5 or self.classifier_hidden < 1:
            raise ConfigError("s_max, n_classes, classifier_hidden must be >= 1 and vocab_size >= 5")
        if not 0.0 <= self.classifier_dropout < 1.0:
            raise ConfigError(f"classifier_dropout must be in [0, 1), got {self.classifier_dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> HiTransformerConfig:
        d = dict(d)
        d["lower"] = EncoderConfig(**d["lower"])
        d["upper"] = EncoderConfig(**d["upper"])
        return cls(**d)


def speaker_width(d_lower: int, n_speakers: int, n_heads: int) -> int:
    """Smallest padding width >= n_speakers making the upper width head-divisible."""
    s = max(1, n_speakers)
    while (d_lower + s) % n_heads:
        s += 1
    return s


def speaker_onehots(speakers: Sequence[str], s_max: int) -> np.ndarray:
    """One-hot speaker codes, indexed by first appearance, zero-padded to ``s_max``."""
    order: dict[str, int] = {}
    for s in speakers:
        order.setdefault(s, len(order))
    if len(order) > s_max:
        raise CapacityError(f"dialog has {len(order)} distinct speakers but s_max is {s_max}")
    out = np.zeros((len(speakers), s_max))
    out[np.arange(len(speakers)), [order[s] for s in speakers]] = 1.0
    return out


@dataclass
class EncodedDialog:
    """Token ids per utterance plus pooling masks and speaker names."""

    ids: list[list[int]]
    masks: list[list[bool]]
    speakers: list[str] | None = None

    def __len__(self) -> int:
        return len(self.ids)


class HiTransformer:
    def __init__(self, cfg: HiTransformerConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        std = cfg.init_std
        d_low = cfg.lower.d_model
        self.token_embedding = init_normal(rng, (cfg.vocab_size, d_low), std, "token_embedding")
        self.lower = EncoderStack(cfg.lower, rng, "lower.", std)
        # utterance positions act on f(u_j) before the speaker code is appended
        self.upper = EncoderStack(replace(cfg.upper, positional_kind="none"), rng, "upper.", std)
        self.upper_positions = None
        if cfg.upper.positional_kind == "learned":
            self.upper_positions = init_normal(rng, (cfg.upper.max_positions, d_low), std, "upper.positions")
        self.classifier = {
            "w1": init_normal(rng, (cfg.upper.d_model, cfg.classifier_hidden), std, "classifier.w1"),
            "b1": init_const(0.0, (cfg.classifier_hidden,), "classifier.b1"),
            "w2": init_normal(rng, (cfg.classifier_hidden, cfg.n_classes), std, "classifier.w2"),
            "b2": init_const(0.0, (cfg.n_classes,), "classifier.b2"),
        }

    # -- parameters ------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("token_embedding", self.token_embedding)]
        out += [("lower." + k, v) for k, v in self.lower.named_parameters()]
        if self.upper_positions is not None:
            out.append(("upper.positions", self.upper_positions))
        out += [("upper." + k, v) for k, v in self.upper.named_parameters()]
        out += [("classifier." + k, v) for k, v in self.classifier.items()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def lower_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if n == "token_embedding" or n.startswith("lower.")}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in state.items():
            if own[name].shape != arr.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {own[name].shape}")
            own[name].data = np.array(arr, dtype=np.float64)

    # -- lower level ------------------------------------------------------

    def embed_utterance(self, ids: Sequence[int]) -> Tensor:
        """Token embedding plus learned position for each id."""
        if len(ids) > self.cfg.lower.max_positions:
            raise LengthError(f"{len(ids)} tokens exceed lower max_positions {self.cfg.lower.max_positions}")
        e = tn.embedding_lookup(self.token_embedding, list(ids))
        return e + self.lower.position_signal(len(ids))

    def utterance_vector(self, ids: Sequence[int], mask: Sequence[bool] | None = None,
                         train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """f(u): lower-encode one utterance and max-pool over its positions."""
        E = self.embed_utterance(ids)
        T = self.lower.run_layers(E, None, train, rng)
        pool = np.ones(len(ids), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        return tn.max_pool_rows(T, pool)

    def utterance_vectors(self, dialog: EncodedDialog, train: bool = False,
                          rng: np.random.Generator | None = None, attn_out: list | None = None) -> Tensor:
        """Batched f(u_j) for every utterance of a dialog, shape [N, d_lower]."""
        n = len(dialog.ids)
        width = max(len(ids) for ids in dialog.ids)
        if width > self.cfg.lower.max_positions:
            raise LengthError(f"{width} tokens exceed lower max_positions {self.cfg.lower.max_positions}")
        ids = np.full((n, width), PAD_ID, dtype=np.int64)
        keys = np.zeros((n, width), dtype=bool)
        pool = np.zeros((n, width), dtype=bool)
        for j, (row, m) in enumerate(zip(dialog.ids, dialog.masks)):
            ids[j, : len(row)] = row
            keys[j, : len(row)] = True
            pool[j, : len(row)] = m
        E = tn.embedding_lookup(self.token_embedding, ids) + self.lower.position_signal(width)
        T = self.lower.run_layers(E, keys, train, rng, attn_out)
        return tn.max_pool_rows(T, pool)

    # -- dialog level -----------------------------------------------------

    def upper_input(self, f: Tensor, speakers: Sequence[str] | None) -> Tensor:
        n = f.shape[0]
        kind = self.cfg.upper.positional_kind
        if kind == "sinusoidal":
            f = f + Tensor(sinusoidal_positions(n, self.cfg.lower.d_model))
        elif kind == "learned":
            if n > self.cfg.upper.max_positions:
                raise LengthError(f"dialog of {n} utterances exceeds upper max_positions")
            f = f + tn.embedding_lookup(self.upper_positions, np.arange(n))
        if self.cfg.speaker_variant:
            if speakers is None:
                raise ContractError("the speaker variant needs speaker names")
            f = tn.concat([f, Tensor(speaker_onehots(speakers, self.cfg.s_max))], axis=1)
        return f

    def forward(self, dialog: EncodedDialog, train: bool = False,
                rng: np.random.Generator | None = None, freeze_lower: bool = False,
                attn_out: list | None = None) -> tuple[Tensor, Tensor]:
        """Return ``(logits, probabilities)``, each of shape [N, n_classes]."""
        if len(dialog) < 1:
            raise ContractError("a dialog needs at least one utterance")
        if self.cfg.speaker_variant and dialog.speakers is None:
            raise ContractError("the speaker variant needs speaker names")
        if freeze_lower:
            with tn.no_grad():
                f = self.utterance_vectors(dialog, train, rng, attn_out)
        else:
            f = self.utterance_vectors(dialog, train, rng, attn_out)
        U = self.upper_input(f, dialog.speakers)
        t = self.upper.run_layers(U, None, train, rng, attn_out)
        C = self.classifier
        h = tn.selu(t @ C["w1"] + C["b1"])
        h = tn.dropout(h, self.cfg.classifier_dropout, train, rng)
        logits = h @ C["w2"] + C["b2"]
        return logits, tn.softmax(logits)

    def predict(self, dialog: EncodedDialog) -> list[int]:
        with tn.no_grad():
            logits, _ = self.forward(dialog, train=False)
        return predict_from_logits(logits.data)


def predict_from_logits(logits: np.ndarray) -> list[int]:
    """Row-wise argmax; ties go to the lowest class index."""
    return [int(i) for i in np.argmax(logits, axis=-1)]
