"""TLoRA and LoRA adapters on frozen projection weights.

TLoRA update for a site with frozen ``W0`` (d x k)::

    h = W0 x + Dropout(alpha * A (B (C x)))

with ``A`` (d x r) and ``C`` (r x k) fixed Kaiming-normal draws, ``B`` (r x r)
zero-initialised and trainable, and a trainable scalar ``alpha`` starting at
1.0. The LoRA baseline is ``h = W0 x + Dropout(s * up (down x))`` with a fixed
``s = lora_fixed_alpha / r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .model import SITE_KINDS, EncoderModel
from .seeding import derive_seed, make_rng

DEFAULT_TARGETS = ("query", "value")
METHODS = ("tlora", "lora")


@dataclass
class AdapterConfig:
    method: str = "tlora"
    rank: int = 32
    dropout_p: float = 0.5
    lora_fixed_alpha: float | None = None
    target_sites: tuple[str, ...] = DEFAULT_TARGETS
    kaiming_mode: str = "fan_in"
    allow_extra_sites: bool = False

    def __post_init__(self):
        self.target_sites = tuple(self.target_sites)
        if self.lora_fixed_alpha is None:
            self.lora_fixed_alpha = float(self.rank)

    def validate(self) -> "AdapterConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown adapter method {self.method!r}; expected one of {METHODS}")
        if int(self.rank) < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"adapter dropout must be in [0, 1), got {self.dropout_p}")
        if self.kaiming_mode not in ("fan_in", "fan_out"):
            raise ConfigError(f"kaiming_mode must be fan_in or fan_out, got {self.kaiming_mode!r}")
        for s in self.target_sites:
            if s not in SITE_KINDS:
                raise ConfigError(f"unknown target site {s!r}; known sites: {SITE_KINDS}")
            if s not in DEFAULT_TARGETS and not self.allow_extra_sites:
                raise ConfigError(f"site {s!r} is not an adaptation target unless allow_extra_sites is set")
        return self

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rank": self.rank,
            "dropout_p": self.dropout_p,
            "lora_fixed_alpha": self.lora_fixed_alpha,
            "target_sites": list(self.target_sites),
            "kaiming_mode": self.kaiming_mode,
            "allow_extra_sites": self.allow_extra_sites,
        }


def _kaiming(rng: np.random.Generator, shape: tuple[int, int], fan: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan)


def _check_rank(W0: Tensor, r: int) -> None:
    d, k = W0.shape
    if not 1 <= r <= min(d, k):
        raise ConfigError(f"rank {r} must lie in [1, min(d, k)] = [1, {min(d, k)}] for weight {W0.shape}")


class TLoRAAdapter:
    method = "tlora"

    def __init__(self, W0: Tensor, A: Tensor, B: Tensor, C: Tensor, alpha: Tensor, dropout_p: float = 0.0):
        self.W0, self.A, self.B, self.C, self.alpha = W0, A, B, C, alpha
        self.dropout_p = dropout_p

    @property
    def rank(self) -> int:
        return self.B.shape[0]

    def trainable(self) -> list[Tensor]:
        return [self.B, self.alpha]

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B, "C": self.C, "alpha": self.alpha}

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return tlora_forward(self, x, train=train, rng=rng)

    def delta_w(self) -> np.ndarray:
        return materialize_delta_w(self)


class LoRAAdapter:
    method = "lora"

    def __init__(self, W0: Tensor, down: Tensor, up: Tensor, scaling: float, dropout_p: float = 0.0):
        self.W0, self.down, self.up = W0, down, up
        self.scaling = float(scaling)
        self.dropout_p = dropout_p

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def trainable(self) -> list[Tensor]:
        return [self.down, self.up]

    def tensors(self) -> dict[str, Tensor]:
        return {"down": self.down, "up": self.up}

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return lora_forward(self, x, train=train, rng=rng)

    def delta_w(self) -> np.ndarray:
        return materialize_delta_w(self)


def init_tlora(W0: Tensor, r: int, seed: int, dropout_p: float = 0.0, kaiming_mode: str = "fan_in") -> TLoRAAdapter:
    """Fixed A, C (Kaiming normal), zero B, alpha = 1. Only B and alpha train.

    fan_in mode: A consumes an r-vector (fan 1/r variance scale), C a k-vector.
    """
    _check_rank(W0, r)
    d, k = W0.shape
    rng = make_rng(seed)
    fan_a, fan_c = (r, k) if kaiming_mode == "fan_in" else (d, r)
    A = Tensor(_kaiming(rng, (d, r), fan_a), name="A")
    C = Tensor(_kaiming(rng, (r, k), fan_c), name="C")
    B = Tensor(np.zeros((r, r)), requires_grad=True, name="B")
    alpha = Tensor([1.0], requires_grad=True, name="alpha")
    return TLoRAAdapter(W0, A, B, C, alpha, dropout_p)


def init_lora(W0: Tensor, r: int, seed: int, dropout_p: float = 0.0, fixed_alpha: float | None = None) -> LoRAAdapter:
    """Gaussian down-projection (std 1/sqrt(k)), zero up-projection."""
    _check_rank(W0, r)
    d, k = W0.shape
    rng = make_rng(seed)
    down = Tensor(rng.standard_normal((r, k)) / math.sqrt(k), requires_grad=True, name="down")
    up = Tensor(np.zeros((d, r)), requires_grad=True, name="up")
    fixed_alpha = float(r) if fixed_alpha is None else float(fixed_alpha)
    return LoRAAdapter(W0, down, up, fixed_alpha / r, dropout_p)


def _check_width(adapter, x: Tensor) -> None:
    if x.shape[-1] != adapter.W0.shape[1]:
        raise ad.DimensionError(f"input width {x.shape[-1]} does not match weight {adapter.W0.shape}")


def tlora_forward(adapter: TLoRAAdapter, x: Tensor, train: bool = False, rng=None) -> Tensor:
    """Rows of ``x`` are inputs; returns ``W0 x + Dropout(alpha A B C x)`` row-wise."""
    _check_width(adapter, x)
    h0 = ad.matmul(x, ad.transpose(adapter.W0))
    z = ad.matmul(x, ad.transpose(adapter.C))
    z = ad.matmul(z, ad.transpose(adapter.B))
    z = ad.matmul(z, ad.transpose(adapter.A))
    dh = ad.scale(z, adapter.alpha)
    return ad.add(h0, ad.dropout(dh, adapter.dropout_p, train, rng))


def lora_forward(adapter: LoRAAdapter, x: Tensor, train: bool = False, rng=None) -> Tensor:
    _check_width(adapter, x)
    h0 = ad.matmul(x, ad.transpose(adapter.W0))
    z = ad.matmul(x, ad.transpose(adapter.down))
    z = ad.matmul(z, ad.transpose(adapter.up))
    dh = ad.mul_const(z, adapter.scaling)
    return ad.add(h0, ad.dropout(dh, adapter.dropout_p, train, rng))


def materialize_delta_w(adapter) -> np.ndarray:
    """Dense update (d x k) including alpha or the fixed LoRA scaling. Analysis only."""
    if isinstance(adapter, TLoRAAdapter):
        return adapter.alpha.item() * (adapter.A.data @ adapter.B.data @ adapter.C.data)
    return adapter.scaling * (adapter.up.data @ adapter.down.data)


@dataclass
class AdaptedModel:
    """A frozen base model plus adapters keyed by site name."""

    base: EncoderModel
    adapters: dict[str, object] = field(default_factory=dict)
    config: AdapterConfig | None = None

    def forward(self, token_ids, pad_mask=None, train: bool = False, rng=None) -> Tensor:
        return self.base.forward(token_ids, pad_mask, adapters=self.adapters, train=train, rng=rng)

    __call__ = forward

    def trainable_params(self) -> list[Tensor]:
        out = [t for t in self.base.params.values() if t.requires_grad]
        for a in self.adapters.values():
            out.extend(t for t in a.trainable() if t.requires_grad)
        return out

    def named_trainable(self) -> dict[str, Tensor]:
        out = {n: t for n, t in self.base.params.items() if t.requires_grad}
        for site, a in self.adapters.items():
            for name, t in a.tensors().items():
                if t.requires_grad:
                    out[f"{site}.{name}"] = t
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.base.params)
        for site, a in self.adapters.items():
            for name, t in a.tensors().items():
                out[f"{site}.{name}"] = t
        return out


def attach_adapters(model: EncoderModel, cfg: AdapterConfig, seed: int) -> AdaptedModel:
    """Wrap every target site of every layer; other projections stay plain frozen layers.

    Per-site seeds come from the run seed and the site name.
    """
    cfg.validate()
    if any(t.requires_grad for t in model.params.values()):
        raise ConfigError("attach_adapters expects a frozen base model; call freeze_all first")
    adapters: dict[str, object] = {}
    for i in range(model.cfg.n_layers):
        for kind in cfg.target_sites:
            site = f"layers.{i}.attn.{kind}"
            W0 = model.params[f"{site}.weight"]
            site_seed = derive_seed(seed, f"adapter/{site}")
            if cfg.method == "tlora":
                adapters[site] = init_tlora(W0, cfg.rank, site_seed, cfg.dropout_p, cfg.kaiming_mode)
            else:
                adapters[site] = init_lora(W0, cfg.rank, site_seed, cfg.dropout_p, cfg.lora_fixed_alpha)
    return AdaptedModel(model, adapters, cfg)


def site_label(site: str) -> tuple[int, str]:
    """``layers.3.attn.query`` -> (3, 'q')."""
    parts = site.split(".")
    return int(parts[1]), parts[3][0]


def param_count(method: str, r: int, d: int, k: int, n_sites: int) -> dict:
    """Trainable-parameter census for ``n_sites`` adapted d x k weights.

    TLoRA: n_sites * (r^2 + 1); LoRA: n_sites * r * (d + k). The improvement
    factor is LoRA/TLoRA at the same rank, rounded; the exact ratio is kept too.
    """
    for name, v in (("r", r), ("d", d), ("k", k), ("n_sites", n_sites)):
        if int(v) < 1:
            raise ConfigError(f"{name} must be positive, got {v}")
    tlora = n_sites * (r * r + 1)
    lora = n_sites * r * (d + k)
    if method not in ("tlora", "lora", "full"):
        raise ConfigError(f"unknown method {method!r}")
    trainable = {"tlora": tlora, "lora": lora, "full": n_sites * d * k}[method]
    ratio = lora / tlora
    return {
        "method": method,
        "trainable": trainable,
        "tlora": tlora,
        "lora": lora,
        "full_ft_adapted_weights": n_sites * d * k,
        "improvement_vs_lora": int(round(ratio)),
        "improvement_exact": ratio,
    }


def census(params: Iterable[Tensor]) -> int:
    return sum(t.size for t in params)
