"""Small pre-norm transformer encoder standing in for a pretrained checkpoint."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .seeding import make_rng

SITE_KINDS = ("query", "key", "value", "output")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 32
    n_classes: int = 2
    dropout_p: float = 0.0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_mult", "max_seq_len", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"model.dropout_p must be in [0, 1), got {self.dropout_p}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class Linear:
    """``y = x W^T + b`` with W stored as (d_out, d_in), i.e. ``h0 = W0 x`` per row."""

    def __init__(self, weight: Tensor, bias: Tensor, name: str):
        self.weight = weight
        self.bias = bias
        self.name = name

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor, adapter=None, train: bool = False, rng=None) -> Tensor:
        if adapter is None:
            h = ad.matmul(x, ad.transpose(self.weight))
        else:
            h = adapter.forward(x, train=train, rng=rng)
        return ad.add(h, self.bias)


class EncoderModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.linears: dict[str, Linear] = {}
        for i in range(cfg.n_layers):
            for kind in SITE_KINDS:
                self._linear(f"layers.{i}.attn.{kind}")
            self._linear(f"layers.{i}.ffn.in")
            self._linear(f"layers.{i}.ffn.out")
        self._linear("classifier")

    def _linear(self, name: str) -> None:
        self.linears[name] = Linear(self.params[f"{name}.weight"], self.params[f"{name}.bias"], name)

    def adaptable_sites(self) -> list[str]:
        """Attention projection sites, layer-major."""
        return [f"layers.{i}.attn.{k}" for i in range(self.cfg.n_layers) for k in SITE_KINDS]

    def forward(
        self,
        token_ids,
        pad_mask=None,
        adapters: Mapping[str, object] | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits of shape (batch, n_classes).

        ``pad_mask`` is boolean (batch, seq) with True marking padding; padded
        keys are excluded from every attention softmax. Position 0 feeds the
        classifier.
        """
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DataError(f"token ids must be batch x seq, got shape {ids.shape}")
        b, t = ids.shape
        if t > cfg.max_seq_len:
            raise DataError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise DataError(f"token id outside [0, {cfg.vocab_size})")
        mask = np.zeros((b, t), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        adapters = adapters or {}
        p = self.params
        h_dim = cfg.d_model // cfg.n_heads
        inv_sqrt = 1.0 / math.sqrt(h_dim)
        key_mask = np.repeat(mask, cfg.n_heads, axis=0)[:, None, :]
        drop_p = cfg.dropout_p

        def proj(name, x):
            return self.linears[name](x, adapters.get(name), train=train, rng=rng)

        def heads(x):
            x = ad.reshape(x, (b, t, cfg.n_heads, h_dim))
            x = ad.transpose(x, (0, 2, 1, 3))
            return ad.reshape(x, (b * cfg.n_heads, t, h_dim))

        positions = np.broadcast_to(np.arange(t), (b, t))
        x = ad.add(ad.embedding(p["tok_emb"], ids), ad.embedding(p["pos_emb"], positions))
        x = ad.reshape(x, (b * t, cfg.d_model))
        for i in range(cfg.n_layers):
            pre = f"layers.{i}"
            h = ad.layer_norm(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
            q = heads(proj(f"{pre}.attn.query", h))
            k = heads(proj(f"{pre}.attn.key", h))
            v = heads(proj(f"{pre}.attn.value", h))
            scores = ad.mul_const(ad.matmul(q, ad.transpose(k)), inv_sqrt)
            attn = ad.softmax(scores, axis=-1, mask=key_mask)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (b, cfg.n_heads, t, h_dim)), (0, 2, 1, 3)), (b * t, cfg.d_model))
            o = ad.dropout(proj(f"{pre}.attn.output", ctx), drop_p, train, rng)
            x = ad.add(x, o)
            h = ad.layer_norm(x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
            f = ad.gelu(proj(f"{pre}.ffn.in", h))
            f = ad.dropout(proj(f"{pre}.ffn.out", f), drop_p, train, rng)
            x = ad.add(x, f)
        x = ad.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
        cls = ad.select(ad.reshape(x, (b, t, cfg.d_model)), axis=1, index=0)
        return proj("classifier", cls)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int) -> EncoderModel:
    """Kaiming-normal projections, zero biases, N(0, 0.02) embeddings, unit LN gains."""
    cfg.validate()
    rng = make_rng(seed, "model")
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    params: dict[str, Tensor] = {}

    def add_linear(name, d_out, d_in):
        params[f"{name}.weight"] = Tensor(rng.standard_normal((d_out, d_in)) * math.sqrt(2.0 / d_in), name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(d_out), name=f"{name}.bias")

    def add_ln(name):
        params[f"{name}.gain"] = Tensor(np.ones(d), name=f"{name}.gain")
        params[f"{name}.bias"] = Tensor(np.zeros(d), name=f"{name}.bias")

    params["tok_emb"] = Tensor(rng.standard_normal((cfg.vocab_size, d)) * 0.02, name="tok_emb")
    params["pos_emb"] = Tensor(rng.standard_normal((cfg.max_seq_len, d)) * 0.02, name="pos_emb")
    for i in range(cfg.n_layers):
        add_ln(f"layers.{i}.ln1")
        for kind in SITE_KINDS:
            add_linear(f"layers.{i}.attn.{kind}", d, d)
        add_ln(f"layers.{i}.ln2")
        add_linear(f"layers.{i}.ffn.in", f, d)
        add_linear(f"layers.{i}.ffn.out", d, f)
    add_ln("final_ln")
    add_linear("classifier", cfg.n_classes, d)
    for t in params.values():
        t.requires_grad = True
    return EncoderModel(cfg, params)


def freeze_all(model: EncoderModel) -> None:
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None


def unfreeze_all(model: EncoderModel) -> None:
    for t in model.params.values():
        t.requires_grad = True


def trainable_params(model) -> list[Tensor]:
    """Grad-requiring tensors of a base model or an adapted model, in stable order."""
    if hasattr(model, "trainable_params"):
        return model.trainable_params()
    return [t for t in model.params.values() if t.requires_grad]


def snapshot(model) -> dict[str, bytes]:
    """Byte-exact capture of every base (and adapter, if present) tensor."""
    tensors = model.named_tensors() if hasattr(model, "named_tensors") else model.params
    return {name: t.data.tobytes() for name, t in tensors.items()}
