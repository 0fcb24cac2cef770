"""SGD training loop tying the encoder, text bank, and losses together.

Reproducibility contract: one master seed fans out into independent named
streams (parameter init, epoch shuffling, text-variant sampling), so runs
with the same seed are bit-identical and a gap-mode run with loss weight 0
matches the plain classification run exactly (the contrastive term is still
reported but its gradient is never applied, and it draws only from its own
stream).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses
from .data import SkeletonBatch
from .encoder import EncoderModel
from .errors import ConfigError, DivergenceError
from .textbank import TextFeatureBank, sample_variant

MODES = ("baseline", "gap", "part_cls")

_STREAM_IDS = {"init": 1, "shuffle": 2, "variant": 3}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=[seed, _STREAM_IDS[name]]))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.1
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (20, 26)
    decay_factor: float = 10.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lam: float = 0.8
    tau: float = 0.1
    loss_variant: str = "kld"
    partition: str = "four_part"
    prompt_type: str = "synonym_plus_parts"
    include_global: bool = True
    seed: int = 1
    mode: str = "baseline"

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.loss_variant not in losses.LOSS_VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss_variant!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        for name in ("base_lr", "decay_factor", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("lam, weight_decay, and momentum must be nonnegative")

    @classmethod
    def paper_preset(cls, **overrides) -> "TrainConfig":
        """The published large-scale recipe: 110 epochs, decays at 90/100."""
        base = dict(epochs=110, batch_size=200, base_lr=0.1, warmup_epochs=5,
                    decay_epochs=(90, 100), decay_factor=10.0, weight_decay=5e-4)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_ce: list[float] = field(default_factory=list)
    epoch_con: list[float] = field(default_factory=list)
    epoch_acc: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    final_train_acc: float = 0.0
    final_test_acc: float | None = None
    wall_time_s: float = 0.0
    seed: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "ce", "con", "acc", "lr"])
            for e in range(len(self.epoch_loss)):
                writer.writerow([e, repr(self.epoch_loss[e]), repr(self.epoch_ce[e]),
                                 repr(self.epoch_con[e]), repr(self.epoch_acc[e]),
                                 repr(self.epoch_lr[e])])

    def summary(self) -> dict:
        return {
            "epochs": len(self.epoch_loss),
            "final_train_acc": self.final_train_acc,
            "final_test_acc": self.final_test_acc,
            "best_train_acc": max(self.epoch_acc) if self.epoch_acc else 0.0,
            "final_loss": self.epoch_loss[-1] if self.epoch_loss else None,
            "wall_time_s": self.wall_time_s,
            "seed": self.seed,
        }


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup, then step decay after each passed decay epoch."""
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    lr = config.base_lr
    for decay_epoch in config.decay_epochs:
        if epoch >= decay_epoch:
            lr /= config.decay_factor
    return lr


def sgd_step(params, grads, state: dict, lr: float, config: TrainConfig,
             context: str = ""):
    """In-place SGD with momentum and coupled weight decay on every array."""
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        elif not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name} {context}".strip())
        g = g + config.weight_decay * w
        v = state.get(name)
        if v is None:
            v = np.zeros_like(w)
            state[name] = v
        v *= config.momentum
        v += g
        w -= (lr * v).astype(w.dtype, copy=False)


def _sample_text_features(bank: TextFeatureBank, labels, num_slots: int, rng, dtype):
    """Per-sample, per-slot variant draw: [slots, B, dim]."""
    out = np.empty((num_slots, len(labels), bank.dim), dtype=dtype)
    for i, label in enumerate(labels):
        for slot in range(num_slots):
            out[slot, i] = sample_variant(bank, int(label), slot, rng)
    return out


def evaluate_accuracy(model: EncoderModel, batch: SkeletonBatch, batch_size: int = 256) -> float:
    """Eval-mode top-1 accuracy over a whole batch."""
    correct = 0
    for start in range(0, batch.num_samples, batch_size):
        x = batch.data[start:start + batch_size]
        y = batch.labels[start:start + batch_size]
        out = model.forward(x, train=False, compute_parts=False)
        correct += int((out.logits.argmax(axis=1) == y).sum())
    return correct / batch.num_samples


def check_bank_coverage(bank: TextFeatureBank, num_classes: int, num_slots: int):
    for c in range(num_classes):
        for s in range(num_slots):
            if (c, s) not in bank.entries:
                raise ConfigError(f"text bank missing entry for class {c}, slot {s}")


def train(train_batch: SkeletonBatch, model: EncoderModel, config: TrainConfig,
          bank: TextFeatureBank | None = None,
          test_batch: SkeletonBatch | None = None) -> tuple[EncoderModel, TrainReport]:
    """Run the full optimization; returns the trained model and its report.

    BLAS is pinned to one thread for the duration: the arrays here are small
    enough that thread fan-out loses, and a fixed thread count keeps the
    bit-for-bit determinism contract easy to honor.
    """
    with threadpool_limits(limits=1):
        return _train_impl(train_batch, model, config, bank, test_batch)


def _train_impl(train_batch, model, config, bank, test_batch):
    t0 = time.monotonic()
    if config.mode == "gap":
        if bank is None:
            raise ConfigError("gap mode needs a text feature bank")
        if bank.dim != model.config.head_dim:
            raise ConfigError(f"bank dim {bank.dim} != projection head dim {model.config.head_dim}")
        check_bank_coverage(bank, train_batch.num_classes, model.num_slots)
    if config.mode == "part_cls" and model.config.head_dim != model.config.num_classes:
        raise ConfigError("part_cls mode needs projection heads sized to num_classes")

    shuffle_rng = rng_stream(config.seed, "shuffle")
    variant_rng = rng_stream(config.seed, "variant")
    state: dict[str, np.ndarray] = {}
    report = TrainReport(seed=config.seed)
    num_samples = train_batch.num_samples
    need_parts = config.mode != "baseline"

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        perm = shuffle_rng.permutation(num_samples)
        loss_sum = ce_sum = con_sum = 0.0
        correct = 0
        for start in range(0, num_samples, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x = train_batch.data[idx]
            y = train_batch.labels[idx]
            out = model.forward(x, train=True, compute_parts=need_parts)
            ce = losses.cross_entropy(out.logits, y)
            dlogits = losses.cross_entropy_grad(out.logits, y)
            con = 0.0
            dparts = None
            if config.mode == "gap":
                text = _sample_text_features(bank, y, model.num_slots, variant_rng, model.dtype)
                slot_losses = []
                slot_grads = []
                for slot in range(model.num_slots):
                    cb = losses.ContrastBatch(out.part_features[slot], text[slot], y, config.tau)
                    slot_loss, dskel = losses.contrastive_loss_and_grad(cb, config.loss_variant)
                    slot_losses.append(slot_loss)
                    slot_grads.append(dskel)
                con = losses.multi_part_loss(slot_losses)
                if config.lam != 0.0:
                    dparts = np.stack(slot_grads) * (config.lam / model.num_slots)
                batch_loss = losses.total_loss(ce, con, config.lam)
            elif config.mode == "part_cls":
                con = losses.part_cls_baseline_loss(out.part_features, y)
                dparts = losses.part_cls_baseline_grad(out.part_features, y)
                batch_loss = ce + con
            else:
                batch_loss = ce
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, sample offset {start}")
            model.backward(dlogits, dparts)
            sgd_step(model.params(), model.grads(), state, lr, config,
                     context=f"(epoch {epoch}, offset {start})")
            b = len(idx)
            loss_sum += batch_loss * b
            ce_sum += ce * b
            con_sum += con * b
            correct += int((out.logits.argmax(axis=1) == y).sum())
        report.epoch_loss.append(loss_sum / num_samples)
        report.epoch_ce.append(ce_sum / num_samples)
        report.epoch_con.append(con_sum / num_samples)
        report.epoch_acc.append(correct / num_samples)
        report.epoch_lr.append(lr)

    report.final_train_acc = evaluate_accuracy(model, train_batch)
    if test_batch is not None:
        report.final_test_acc = evaluate_accuracy(model, test_batch)
    report.wall_time_s = time.monotonic() - t0
    return model, report
