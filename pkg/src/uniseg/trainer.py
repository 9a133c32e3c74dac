"""Two-phase training: CT-only pretraining, then joint fine-tuning on
balanced MRI/CT minibatches.

Pretraining runs at a constant learning rate with the symmetric Tversky
setting; the one-cycle schedule spans only the joint phase. Validation
happens per domain after every joint epoch, and the checkpoint with the
best macro-averaged Dice (earliest on ties) wins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentConfig, Domain, Sample, augment, balanced_batches, split_by_domain, stack_batch
from .losses import CT_PRETRAIN, LossParams, batch_modality_loss, default_loss_table, per_sample_focal_losses
from .metrics import dice
from .network import Model, ParameterSet, save_checkpoint
from .optim import AdamW, OneCycleSchedule, one_cycle_lr

CURVES_HEADER = ["epoch", "domain", "train_loss", "val_loss", "val_dice", "macro_dice", "lr"]


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; names the failing epoch/step."""

    def __init__(self, phase: str, epoch: int, step: int):
        super().__init__(f"non-finite loss in {phase} at epoch {epoch}, step {step}")
        self.phase = phase
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    joint_epochs: int
    pretrain_epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-5
    loss_table: dict[Domain, LossParams] = field(default_factory=default_loss_table)
    pretrain_loss: LossParams = CT_PRETRAIN
    seed: int = 0
    image_size: int = 128
    checkpoint_dir: Path | None = None
    keep_all: bool = False
    augment: AugmentConfig | None = None  # None disables on-the-fly augmentation

    def validate(self):
        if self.joint_epochs < 1 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: dict[Domain, float]
    val_loss: dict[Domain, float]
    val_dice: dict[Domain, float]
    macro_dice: float
    lr: float


def _train_batch(model: Model, batch, loss_table, dropout_rng, aug_rng, aug_config):
    if aug_config is not None:
        batch = [augment(s, aug_rng, aug_config) for s in batch]
    dtype = model.params.tensors()[0].dtype
    images, masks, domains = stack_batch(batch, dtype=dtype)
    prob = model.forward(images, training=True, rng=dropout_rng)
    loss = batch_modality_loss(prob, masks, domains, loss_table)
    sample_losses = per_sample_focal_losses(prob, masks, domains, loss_table)
    return loss, sample_losses, domains


def pretrain_ct(model: Model, ct_train: list[Sample], config: TrainConfig, step_log=None) -> ParameterSet:
    """Optimize on CT alone at a constant learning rate; returns the weights
    that seed joint training (the model is updated in place)."""
    config.validate()
    if not ct_train:
        raise ValueError("CT pretraining split is empty")
    order_rng = np.random.default_rng([config.seed, 101])
    dropout_rng = np.random.default_rng([config.seed, 102])
    aug_rng = np.random.default_rng([config.seed, 103])
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    table = {Domain.CT_LIKE: config.pretrain_loss}

    for epoch in range(config.pretrain_epochs):
        order = order_rng.permutation(len(ct_train))
        for step, start in enumerate(range(0, len(ct_train), config.batch_size)):
            batch = [ct_train[i] for i in order[start : start + config.batch_size]]
            loss, _, _ = _train_batch(model, batch, table, dropout_rng, aug_rng, config.augment)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged("pretraining", epoch + 1, step)
            if step_log is not None:
                step_log.append(value)
            T.backward(loss)
            opt.step()
            opt.zero_grad()
    return model.params


def validate(model: Model, samples: list[Sample], loss_params: LossParams, batch_size: int = 8):
    """Mean focal Tversky loss and mean per-sample Dice (threshold 0.5,
    strictly-greater rule) with dropout disabled."""
    if not samples:
        raise ValueError("validation split is empty")
    losses, dices = [], []
    table = {s.domain: loss_params for s in samples}
    dtype = model.params.tensors()[0].dtype
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images, masks, domains = stack_batch(chunk, dtype=dtype)
            prob = model.forward(images, training=False)
            losses.extend(per_sample_focal_losses(prob, masks, domains, table))
            for i, s in enumerate(chunk):
                pred = (prob.data[i] > 0.5).astype(np.uint8)
                dices.append(dice(pred, s.mask))
    return float(np.mean(losses)), float(np.mean(dices))


def select_best_epoch(records: list[EpochRecord]) -> int:
    """Epoch number with the highest macro Dice, earliest on ties."""
    if not records:
        raise ValueError("no epoch records")
    best = records[0]
    for r in records[1:]:
        if r.macro_dice > best.macro_dice:
            best = r
    return best.epoch


def joint_train(
    model: Model,
    mri_train: list[Sample],
    ct_train: list[Sample],
    mri_val: list[Sample],
    ct_val: list[Sample],
    config: TrainConfig,
):
    """Balanced dual-domain fine-tuning under a one-cycle schedule.

    Returns (best ParameterSet, list of EpochRecord). Checkpoints are
    written to config.checkpoint_dir when set: best.ckpt always, plus
    epoch_k.ckpt per epoch when keep_all.
    """
    config.validate()
    for name, split in (
        ("MRI train", mri_train),
        ("CT train", ct_train),
        ("MRI val", mri_val),
        ("CT val", ct_val),
    ):
        if not split:
            raise ValueError(f"{name} split is empty")

    half = config.batch_size // 2
    steps_per_epoch = -(-max(len(mri_train), len(ct_train)) // half)
    total_steps = config.joint_epochs * steps_per_epoch
    schedule = OneCycleSchedule(max_lr=config.lr, total_steps=max(2, total_steps))
    batch_rng = np.random.default_rng([config.seed, 201])
    dropout_rng = np.random.default_rng([config.seed, 202])
    aug_rng = np.random.default_rng([config.seed, 203])
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)

    records: list[EpochRecord] = []
    best_params: ParameterSet | None = None
    best_macro = -1.0
    global_step = 0
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.joint_epochs + 1):
        sums = {Domain.MRI_LIKE: 0.0, Domain.CT_LIKE: 0.0}
        counts = {Domain.MRI_LIKE: 0, Domain.CT_LIKE: 0}
        for step, batch in enumerate(
            balanced_batches(mri_train, ct_train, config.batch_size, batch_rng)
        ):
            n_mri = sum(1 for s in batch if s.domain is Domain.MRI_LIKE)
            assert n_mri == half and len(batch) == config.batch_size, "unbalanced batch"
            loss, sample_losses, domains = _train_batch(
                model, batch, config.loss_table, dropout_rng, aug_rng, config.augment
            )
            if not math.isfinite(loss.item()):
                raise TrainingDiverged("joint training", epoch, step)
            for value, domain in zip(sample_losses, domains):
                sums[domain] += float(value)
                counts[domain] += 1
            T.backward(loss)
            opt.step(lr=one_cycle_lr(schedule, min(global_step, schedule.total_steps - 1)))
            opt.zero_grad()
            global_step += 1

        mri_loss, mri_dice = validate(model, mri_val, config.loss_table[Domain.MRI_LIKE], config.batch_size)
        ct_loss, ct_dice = validate(model, ct_val, config.loss_table[Domain.CT_LIKE], config.batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_loss={d: sums[d] / counts[d] for d in sums},
            val_loss={Domain.MRI_LIKE: mri_loss, Domain.CT_LIKE: ct_loss},
            val_dice={Domain.MRI_LIKE: mri_dice, Domain.CT_LIKE: ct_dice},
            macro_dice=(mri_dice + ct_dice) / 2.0,
            lr=one_cycle_lr(schedule, min(global_step - 1, schedule.total_steps - 1)),
        )
        records.append(record)
        if ckpt_dir and config.keep_all:
            save_checkpoint(model.params, ckpt_dir / f"epoch_{epoch}.ckpt")
        if record.macro_dice > best_macro:
            best_macro = record.macro_dice
            best_params = model.params.copy()

    assert select_best_epoch(records) == next(
        r.epoch for r in records if r.macro_dice == best_macro
    )
    if ckpt_dir:
        save_checkpoint(best_params, ckpt_dir / "best.ckpt")
    return best_params, records


def log_curves(records: list[EpochRecord], path):
    """Write per-epoch curves: one row per (epoch, domain) plus a macro row.

    Floats are written with repr so a parse reproduces them exactly.
    """
    if not records:
        raise ValueError("no records to log")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVES_HEADER)
        for r in records:
            for domain in (Domain.MRI_LIKE, Domain.CT_LIKE):
                writer.writerow(
                    [
                        r.epoch,
                        domain.tag,
                        repr(r.train_loss[domain]),
                        repr(r.val_loss[domain]),
                        repr(r.val_dice[domain]),
                        repr(r.macro_dice),
                        repr(r.lr),
                    ]
                )
            mean_train = (r.train_loss[Domain.MRI_LIKE] + r.train_loss[Domain.CT_LIKE]) / 2.0
            mean_val = (r.val_loss[Domain.MRI_LIKE] + r.val_loss[Domain.CT_LIKE]) / 2.0
            writer.writerow(
                [r.epoch, "macro", repr(mean_train), repr(mean_val), repr(r.macro_dice), repr(r.macro_dice), repr(r.lr)]
            )


def parse_curves(path) -> list[EpochRecord]:
    """Read a curves CSV back into EpochRecords (macro rows are derived)."""
    rows: dict[int, dict] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            epoch = int(row["epoch"])
            entry = rows.setdefault(
                epoch, {"train_loss": {}, "val_loss": {}, "val_dice": {}, "macro": None, "lr": None}
            )
            if row["domain"] == "macro":
                continue
            domain = Domain.from_tag(row["domain"])
            entry["train_loss"][domain] = float(row["train_loss"])
            entry["val_loss"][domain] = float(row["val_loss"])
            entry["val_dice"][domain] = float(row["val_dice"])
            entry["macro"] = float(row["macro_dice"])
            entry["lr"] = float(row["lr"])
    return [
        EpochRecord(
            epoch=e,
            train_loss=v["train_loss"],
            val_loss=v["val_loss"],
            val_dice=v["val_dice"],
            macro_dice=v["macro"],
            lr=v["lr"],
        )
        for e, v in sorted(rows.items())
    ]
