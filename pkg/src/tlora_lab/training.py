"""AdamW training with linear decay, per-epoch snapshots and run-directory output.

Run directory layout::

    config.json            resolved configuration and seed derivations
    metrics.csv            epoch, train_loss, val_loss, val_acc, then per site
                           <site>.b_norm, <site>.alpha, <site>.a_norm, <site>.c_norm
    base_model.bin/.json   frozen base weights and their layout
    weights/epoch_NNN.bin  adapter tensors at each snapshot
    weights/manifest.json  per-site method, rank, shapes; per-epoch alphas and layouts
    data/train.tsv, data/val.tsv

For LoRA runs the per-site columns hold ||dW||, the fixed scaling,
||up|| and ||down|| respectively.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdaptedModel, LoRAAdapter, TLoRAAdapter
from .autodiff import Tensor
from .data import Batch
from .errors import ConfigError, NumericalError
from .runio import INCOMPLETE, csv_text, dump_json, save_flat, write_text_atomic
from .seeding import make_rng


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 30
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "linear"
    seed: int = 0
    snapshot_every: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.snapshot_every) < 1:
            raise ConfigError(f"snapshot_every must be >= 1, got {self.snapshot_every}")
        if self.schedule != "linear":
            raise ConfigError(f"only the linear schedule is supported, got {self.schedule!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr_t: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    names: Sequence[str] | None = None,
) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else (params[i].name or f"param[{i}]")
            raise NumericalError(f"non-finite gradient for parameter {label}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data -= lr_t * weight_decay * p.data
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + eps)


def linear_lr(step: int, total_steps: int, base_lr: float) -> float:
    """``base_lr * (1 - step/total_steps)``; no warmup."""
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * (1.0 - step / total_steps)


# ---------------------------------------------------------------- evaluation


def evaluate(model, batch: Batch, batch_size: int = 256) -> dict:
    """Eval-mode mean loss and argmax accuracy (ties go to the lowest class index)."""
    n = len(batch)
    total_loss = 0.0
    correct = 0
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        logits = model(batch.ids[lo:hi], batch.pad_mask[lo:hi])
        total_loss += ad.cross_entropy(logits, batch.labels[lo:hi]).item() * (hi - lo)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels[lo:hi]))
    return {"loss": total_loss / n, "accuracy": correct / n}


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------- snapshots


@dataclass
class EpochSnapshot:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    b_norms: dict[str, float] = field(default_factory=dict)
    alphas: dict[str, float] = field(default_factory=dict)
    a_norms: dict[str, float] = field(default_factory=dict)
    c_norms: dict[str, float] = field(default_factory=dict)


def site_stats(adapter) -> tuple[float, float, float, float]:
    """(b_norm, alpha, a_norm, c_norm) with Frobenius norms."""
    if isinstance(adapter, TLoRAAdapter):
        return (
            float(np.linalg.norm(adapter.B.data)),
            adapter.alpha.item(),
            float(np.linalg.norm(adapter.A.data)),
            float(np.linalg.norm(adapter.C.data)),
        )
    if isinstance(adapter, LoRAAdapter):
        return (
            float(np.linalg.norm(adapter.delta_w())),
            adapter.scaling,
            float(np.linalg.norm(adapter.up.data)),
            float(np.linalg.norm(adapter.down.data)),
        )
    raise TypeError(f"unknown adapter {type(adapter).__name__}")


def take_snapshot(model, epoch: int, train_loss: float, val: dict) -> EpochSnapshot:
    snap = EpochSnapshot(epoch, train_loss, val["loss"], val["accuracy"])
    for site, adapter in getattr(model, "adapters", {}).items():
        b, a, an, cn = site_stats(adapter)
        snap.b_norms[site], snap.alphas[site] = b, a
        snap.a_norms[site], snap.c_norms[site] = an, cn
    return snap


def metrics_header(sites: Sequence[str]) -> list[str]:
    cols = ["epoch", "train_loss", "val_loss", "val_acc"]
    for s in sites:
        cols += [f"{s}.b_norm", f"{s}.alpha", f"{s}.a_norm", f"{s}.c_norm"]
    return cols


def metrics_rows(snaps: Sequence[EpochSnapshot], sites: Sequence[str]) -> list[list]:
    rows = []
    for s in snaps:
        row = [s.epoch, s.train_loss, s.val_loss, s.val_acc]
        for site in sites:
            row += [s.b_norms[site], s.alphas[site], s.a_norms[site], s.c_norms[site]]
        rows.append(row)
    return rows


# ---------------------------------------------------------------- run directory


class RunWriter:
    """Writes snapshots into a run directory as training proceeds."""

    def __init__(self, run_dir: Path, model):
        self.dir = Path(run_dir)
        self.model = model
        self.sites = list(getattr(model, "adapters", {}))
        (self.dir / "weights").mkdir(parents=True, exist_ok=True)
        self.manifest = {"format": "float64-le", "sites": [], "snapshots": []}
        for site, a in getattr(model, "adapters", {}).items():
            self.manifest["sites"].append(
                {
                    "site": site,
                    "method": a.method,
                    "r": a.rank,
                    "shapes": {k: list(t.shape) for k, t in a.tensors().items()},
                    **({"scaling": a.scaling} if isinstance(a, LoRAAdapter) else {}),
                }
            )
        self.snaps: list[EpochSnapshot] = []

    def save_base(self, base) -> None:
        layout = save_flat(self.dir / "base_model.bin", {n: t.data for n, t in base.params.items()})
        write_text_atomic(self.dir / "base_model.json", dump_json({"format": "float64-le", "tensors": layout}))

    def record(self, snap: EpochSnapshot, tag: str | None = None) -> None:
        self.snaps.append(snap)
        if self.sites:
            name = f"epoch_{snap.epoch:03d}" if tag is None else tag
            tensors = {}
            for site, a in self.model.adapters.items():
                for k, t in a.tensors().items():
                    tensors[f"{site}.{k}"] = t.data
            layout = save_flat(self.dir / "weights" / f"{name}.bin", tensors)
            self.manifest["snapshots"].append(
                {"epoch": snap.epoch, "file": f"{name}.bin", "alpha": dict(snap.alphas), "layout": layout}
            )
            write_text_atomic(self.dir / "weights" / "manifest.json", dump_json(self.manifest))
        self.flush_metrics()

    def flush_metrics(self) -> None:
        text = csv_text(metrics_header(self.sites), metrics_rows(self.snaps, self.sites))
        write_text_atomic(self.dir / "metrics.csv", text)


@dataclass
class TrainRun:
    config: dict
    snapshots: list[EpochSnapshot]
    run_dir: Path | None = None
    first_batch_loss: float | None = None
    losses: list[float] = field(default_factory=list)


def _check_data(train_data: Batch) -> None:
    if len(train_data) == 0:
        raise ConfigError("training data is empty")


def baseline_run(model, train_data: Batch, val_data: Batch, cfg: TrainConfig, run_dir: Path | None = None) -> TrainRun:
    """Epoch-0 snapshot only (used for the frozen control arm)."""
    _check_data(train_data)
    writer = RunWriter(run_dir, model) if run_dir is not None else None
    snap = take_snapshot(model, 0, evaluate(model, train_data)["loss"], evaluate(model, val_data))
    if writer:
        writer.record(snap)
    return TrainRun(cfg.to_dict(), [snap], run_dir)


def train(
    model: AdaptedModel,
    train_data: Batch,
    val_data: Batch,
    cfg: TrainConfig,
    run_dir: Path | None = None,
) -> TrainRun:
    """Minimise cross-entropy over the model's trainable parameters only.

    Epoch 0 is recorded before any update (its train loss is the eval-mode
    loss on the training set); later epochs record the mean minibatch loss.
    Shuffling uses a fresh PCG64 stream per epoch, dropout one stream per run.
    """
    cfg.validate()
    _check_data(train_data)
    named = model.named_trainable() if hasattr(model, "named_trainable") else {}
    params = list(named.values()) or ad_trainable(model)
    names = list(named) or None
    if not params:
        raise ConfigError("model has no trainable parameters")
    writer = RunWriter(run_dir, model) if run_dir is not None else None

    n = len(train_data)
    bs = int(cfg.batch_size)
    n_batches = math.ceil(n / bs)
    total = cfg.epochs * n_batches
    state = AdamWState()
    drop_rng = make_rng(cfg.seed, "dropout")
    run = TrainRun(cfg.to_dict(), [], run_dir)

    snap = take_snapshot(model, 0, evaluate(model, train_data)["loss"], evaluate(model, val_data))
    run.snapshots.append(snap)
    if writer:
        writer.record(snap)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = make_rng(cfg.seed, f"shuffle/{epoch}").permutation(n)
        loss_sum = 0.0
        for bi in range(n_batches):
            idx = perm[bi * bs : (bi + 1) * bs]
            ad.zero_grads(params)
            logits = model(train_data.ids[idx], train_data.pad_mask[idx], train=True, rng=drop_rng)
            loss = ad.cross_entropy(logits, train_data.labels[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                _abort(writer, model, epoch, run, f"loss became {lv} at epoch {epoch}, batch {bi}")
            if run.first_batch_loss is None:
                run.first_batch_loss = lv
            run.losses.append(lv)
            ad.backward(loss)
            try:
                adamw_step(
                    params,
                    [p.grad for p in params],
                    state,
                    linear_lr(step, total, cfg.learning_rate),
                    cfg.weight_decay,
                    cfg.betas,
                    cfg.eps,
                    names,
                )
            except NumericalError as exc:
                _abort(writer, model, epoch, run, str(exc))
            step += 1
            loss_sum += lv * len(idx)
        if epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs:
            snap = take_snapshot(model, epoch, loss_sum / n, evaluate(model, val_data))
            run.snapshots.append(snap)
            if writer:
                writer.record(snap)
    return run


def ad_trainable(model) -> list[Tensor]:
    return [t for t in model.params.values() if t.requires_grad] if hasattr(model, "params") else []


def _abort(writer: RunWriter | None, model, epoch: int, run: TrainRun, msg: str):
    if writer is not None:
        nan_snap = EpochSnapshot(epoch, float("nan"), float("nan"), float("nan"))
        for site, adapter in model.adapters.items():
            try:
                b, a, an, cn = site_stats(adapter)
            except (TypeError, ValueError):
                b = a = an = cn = float("nan")
            nan_snap.b_norms[site], nan_snap.alphas[site] = b, a
            nan_snap.a_norms[site], nan_snap.c_norms[site] = an, cn
        writer.record(nan_snap, tag="abort")
        (writer.dir / INCOMPLETE).write_text(f"aborted: {msg}\n", encoding="utf-8")
    raise NumericalError(msg)
