"""Post-norm transformer encoder stack (BERT block layout)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, LengthError
from .tensor import Tensor

POSITIONAL_KINDS = ("learned", "sinusoidal", "none")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 128
    attn_dropout: float = 0.1  # applied to both residual branches
    max_positions: int = 512
    positional_kind: str = "learned"
    ln_eps: float = 1e-12

    def __post_init__(self):
        for field in ("n_layers", "n_heads", "d_model", "d_ff", "max_positions"):
            if getattr(self, field) < 1:
                raise ConfigError(f"encoder {field} must be >= 1, got {getattr(self, field)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError(f"attn_dropout must be in [0, 1), got {self.attn_dropout}")
        if self.positional_kind not in POSITIONAL_KINDS:
            raise ConfigError(f"positional_kind must be one of {POSITIONAL_KINDS}")
        if self.positional_kind == "sinusoidal" and self.d_model % 2:
            raise ConfigError("sinusoidal positions need an even d_model")

    def param_count(self) -> int:
        d, ff = self.d_model, self.d_ff
        per_layer = 4 * d * d + 3 * d + (d * ff + ff) + (ff * d + d) + 4 * d
        table = self.max_positions * d if self.positional_kind == "learned" else 0
        return self.n_layers * per_layer + table

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError(f"sinusoidal positions need an even dimension, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def init_normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def init_const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


class EncoderStack:
    """Parameters plus forward pass of ``n_layers`` post-norm blocks.

    Inputs are ``[T, d]`` or batched ``[B, T, d]`` with a boolean key mask of
    shape ``[T]`` / ``[B, T]``.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "",
                 init_std: float = 0.02):
        self.cfg = cfg
        d, ff = cfg.d_model, cfg.d_ff
        self.params: dict[str, Tensor] = {}

        def normal(name, shape):
            self.params[name] = init_normal(rng, shape, init_std, prefix + name)

        def const(name, shape, value):
            self.params[name] = init_const(value, shape, prefix + name)

        if cfg.positional_kind == "learned":
            normal("positions", (cfg.max_positions, d))
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            for proj in ("q", "k", "v", "o"):
                normal(p + f"attn.w{proj}", (d, d))
                if proj != "k":
                    const(p + f"attn.b{proj}", (d,), 0.0)
            const(p + "ln1.gamma", (d,), 1.0)
            const(p + "ln1.beta", (d,), 0.0)
            normal(p + "ffn.wa", (d, ff))
            const(p + "ffn.ba", (ff,), 0.0)
            normal(p + "ffn.wb", (ff, d))
            const(p + "ffn.bb", (d,), 0.0)
            const(p + "ln2.gamma", (d,), 1.0)
            const(p + "ln2.beta", (d,), 0.0)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def position_signal(self, T: int) -> Tensor | None:
        kind = self.cfg.positional_kind
        if kind == "none":
            return None
        if kind == "sinusoidal":
            return Tensor(sinusoidal_positions(T, self.cfg.d_model))
        if T > self.cfg.max_positions:
            raise LengthError(f"sequence length {T} exceeds max_positions {self.cfg.max_positions}")
        return tn.embedding_lookup(self.params["positions"], np.arange(T))

    def multi_head_attention(self, x: Tensor, mask, layer: int, attn_out: list | None = None) -> Tensor:
        cfg = self.cfg
        P = self.params
        pre = f"layers.{layer}.attn."
        *lead, T, d = x.shape
        if d != cfg.d_model:
            raise ContractError(f"attention input width {d} != d_model {cfg.d_model}")
        h = cfg.n_heads
        dh = d // h
        mask = np.ones((*lead, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ContractError("attention: every key position is masked")
        nl = len(lead)
        split = (*range(nl), nl + 1, nl, nl + 2)  # [.., T, h, dh] -> [.., h, T, dh]

        def heads(name):
            y = x @ P[pre + "w" + name]
            if name != "k":
                y = y + P[pre + "b" + name]
            return tn.transpose(tn.reshape(y, (*lead, T, h, dh)), split)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = tn.scale(q @ tn.transpose(k), 1.0 / np.sqrt(dh))
        scores = tn.mask_keys(scores, mask.reshape(*lead, 1, 1, T))
        # without positions, sums over keys are made order-free so that
        # permuting the sequence permutes the output bitwise
        order_free = cfg.positional_kind == "none"
        weights = tn.softmax(scores, order_free)
        if attn_out is not None:
            attn_out.append(weights.data)
        ctx = tn.order_free_matmul(weights, v) if order_free else weights @ v
        ctx = tn.transpose(ctx, split)
        ctx = tn.reshape(ctx, (*lead, T, d))
        return ctx @ P[pre + "wo"] + P[pre + "bo"]

    def layer(self, x: Tensor, mask, i: int, train: bool = False,
              rng: np.random.Generator | None = None, attn_out: list | None = None) -> Tensor:
        P = self.params
        pre = f"layers.{i}."
        p = self.cfg.attn_dropout
        eps = self.cfg.ln_eps
        a = tn.dropout(self.multi_head_attention(x, mask, i, attn_out), p, train, rng)
        h = tn.layer_norm(x + a, P[pre + "ln1.gamma"], P[pre + "ln1.beta"], eps)
        f = tn.gelu(h @ P[pre + "ffn.wa"] + P[pre + "ffn.ba"]) @ P[pre + "ffn.wb"] + P[pre + "ffn.bb"]
        f = tn.dropout(f, p, train, rng)
        return tn.layer_norm(h + f, P[pre + "ln2.gamma"], P[pre + "ln2.beta"], eps)

    def run_layers(self, x: Tensor, mask=None, train: bool = False,
                   rng: np.random.Generator | None = None, attn_out: list | None = None) -> Tensor:
        for i in range(self.cfg.n_layers):
            x = self.layer(x, mask, i, train, rng, attn_out)
        return x

    def encode(self, x: Tensor, mask=None, train: bool = False,
               rng: np.random.Generator | None = None, attn_out: list | None = None) -> Tensor:
        """Add the positional signal, then run every layer (bidirectional)."""
        pos = self.position_signal(x.shape[-2])
        if pos is not None:
            x = x + pos
        return self.run_layers(x, mask, train, rng, attn_out)
