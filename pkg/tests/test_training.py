import math

import numpy as np
import pytest

from tlora_lab import autodiff as ad
from tlora_lab.adapters import AdapterConfig, attach_adapters
from tlora_lab.data import SynthSpec, build_vocab, encoded_length, gen_synthetic, make_batch
from tlora_lab.errors import ConfigError, NumericalError
from tlora_lab.model import ModelConfig, build_model, freeze_all, snapshot
from tlora_lab.runio import read_csv
from tlora_lab.seeding import make_rng
from tlora_lab.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    baseline_run,
    evaluate,
    linear_lr,
    train,
)


def test_adamw_first_step_moves_by_lr():
    p = ad.Tensor([1.0], requires_grad=True)
    adamw_step([p], [np.array([1.0])], AdamWState(), lr_t=0.1, weight_decay=0.0)
    assert p.item() == pytest.approx(0.9, abs=1e-7)


def test_adamw_zero_grad_zero_decay_is_noop():
    p = ad.Tensor([0.3, -2.0], requires_grad=True)
    adamw_step([p], [np.zeros(2)], AdamWState(), lr_t=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_adamw_decoupled_decay_alone():
    p = ad.Tensor([2.0], requires_grad=True)
    state = AdamWState()
    expected = 2.0
    for _ in range(3):
        adamw_step([p], [np.zeros(1)], state, lr_t=0.1, weight_decay=0.01)
        expected -= 0.1 * 0.01 * expected
    assert p.item() == expected


def test_adamw_hand_trace_two_steps():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    p = ad.Tensor([0.5], requires_grad=True)
    state = AdamWState()
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.2, -0.4], start=1):
        adamw_step([p], [np.array([g])], state, lr_t=lr, weight_decay=0.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert p.item() == pytest.approx(x, rel=1e-14)


def test_adamw_names_nonfinite_parameter():
    p = ad.Tensor([1.0], requires_grad=True)
    with pytest.raises(NumericalError, match="layers.0.attn.query.B"):
        adamw_step([p], [np.array([np.nan])], AdamWState(), 0.1, names=["layers.0.attn.query.B"])


def test_linear_lr_endpoints_and_monotone():
    assert linear_lr(0, 100, 1e-3) == 1e-3
    assert linear_lr(100, 100, 1e-3) == 0.0
    assert linear_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    lrs = [linear_lr(s, 37, 0.5) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


class ConstLogits:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def __call__(self, ids, mask):
        return ad.Tensor(self.logits[: len(ids)])


def test_evaluate_ties_go_to_class_zero():
    from tlora_lab.data import Batch

    labels = np.array([0, 1, 1, 0, 1])
    b = Batch(np.zeros((5, 2), dtype=np.int64), np.zeros((5, 2), dtype=bool), labels)
    out = evaluate(ConstLogits(np.zeros((5, 2))), b)
    assert out["accuracy"] == pytest.approx(2 / 5)
    perfect = np.eye(2)[labels] * 5.0
    assert evaluate(ConstLogits(perfect), b)["accuracy"] == 1.0


@pytest.fixture(scope="module")
def tiny_task():
    tr, va = gen_synthetic(SynthSpec(n_examples=64, n_val=32, vocab_size=12, seq_len=4, seed=1))
    vocab = build_vocab(tr)
    L = max(encoded_length(e) for e in tr + va)
    return vocab, make_batch(vocab, tr, L), make_batch(vocab, va, L)


def tiny_model(vocab, method="tlora"):
    m = build_model(ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=2, max_seq_len=16), 0)
    freeze_all(m)
    return m, attach_adapters(m, AdapterConfig(method=method, rank=4), 0)


def test_frozen_model_is_near_chance(tiny_task):
    vocab, tr, va = tiny_task
    m, _ = tiny_model(vocab)
    assert abs(evaluate(m, tr)["accuracy"] - 0.5) <= 0.1


@pytest.mark.parametrize("method", ["tlora", "lora"])
def test_training_changes_only_adapter_parameters(tiny_task, method, tmp_path):
    vocab, tr, va = tiny_task
    m, am = tiny_model(vocab, method)
    before = snapshot(am)
    run = train(am, tr, va, TrainConfig(epochs=3, seed=4), tmp_path / "run")
    after = snapshot(am)
    trainable = {"tlora": ("B", "alpha"), "lora": ("down", "up")}[method]
    for name, raw in before.items():
        moved = after[name] != raw
        if name.rsplit(".", 1)[-1] in trainable and ".attn." in name:
            continue
        assert not moved, name
    assert any(after[n] != before[n] for n in before if n.endswith(trainable[0]))
    assert len(run.snapshots) == 4
    assert (tmp_path / "run" / "metrics.csv").exists()
    idx = make_rng(4, "shuffle/1").permutation(len(tr))[:32]
    first = ad.cross_entropy(m(tr.ids[idx], tr.pad_mask[idx]), tr.labels[idx]).item()
    # dropout acts on a zero update, so the first batch sees the frozen model exactly
    assert run.first_batch_loss == first


def test_epoch_zero_snapshot_starting_conditions(tiny_task):
    vocab, tr, va = tiny_task
    m, am = tiny_model(vocab)
    run = train(am, tr, va, TrainConfig(epochs=2, seed=1))
    s0 = run.snapshots[0]
    assert all(v == 0.0 for v in s0.b_norms.values())
    assert all(v == 1.0 for v in s0.alphas.values())
    assert s0.val_acc == evaluate(m, va)["accuracy"]
    assert any(v > 0 for v in run.snapshots[-1].b_norms.values())


def test_same_seed_same_losses_and_metrics(tiny_task, tmp_path):
    vocab, tr, va = tiny_task
    runs = []
    for k in range(2):
        _, am = tiny_model(vocab)
        runs.append(train(am, tr, va, TrainConfig(epochs=2, seed=9), tmp_path / f"r{k}"))
    assert runs[0].losses == runs[1].losses
    a = (tmp_path / "r0" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "r1" / "metrics.csv").read_bytes()


def test_baseline_run_matches_frozen_accuracy(tiny_task, tmp_path):
    vocab, tr, va = tiny_task
    m, am = tiny_model(vocab)
    run = baseline_run(am, tr, va, TrainConfig(), tmp_path / "b")
    assert run.snapshots[0].val_acc == evaluate(m, va)["accuracy"]
    header, rows = read_csv(tmp_path / "b" / "metrics.csv")
    assert len(rows) == 1 and header[:4] == ["epoch", "train_loss", "val_loss", "val_acc"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_and_marks_run(tiny_task, tmp_path):
    vocab, tr, va = tiny_task
    _, am = tiny_model(vocab)
    site = next(iter(am.adapters.values()))
    site.alpha.data[...] = np.inf
    site.B.data[...] = 1.0
    with pytest.raises(NumericalError):
        train(am, tr, va, TrainConfig(epochs=1), tmp_path / "bad")
    assert (tmp_path / "bad" / ".incomplete").exists()
    assert (tmp_path / "bad" / "weights" / "abort.bin").exists()


def test_train_requires_trainable_parameters(tiny_task):
    vocab, tr, va = tiny_task
    m, _ = tiny_model(vocab)
    with pytest.raises(ConfigError):
        train(m, tr, va, TrainConfig(epochs=1))
