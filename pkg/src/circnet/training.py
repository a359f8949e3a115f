"""Training and evaluation loops with CSV logging and resumable checkpoints."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .data import batch_iterator
from .metrics import GapAccumulator


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; carries the failing step."""


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.002
    decay_rate: float = 0.8
    decay_every: int = 4000
    clip_norm: float = 1.0
    seed: int = 7
    augment: bool = False
    checkpoint_each_epoch: bool = False

    @classmethod
    def from_config(cls, cfg) -> "TrainSettings":
        return cls(
            epochs=cfg.get_int("train.epochs"),
            batch_size=cfg.get_int("train.batch_size"),
            lr=cfg.get_float("train.lr"),
            decay_rate=cfg.get_float("train.decay_rate"),
            decay_every=cfg.get_int("train.decay_every_examples"),
            clip_norm=cfg.get_float("train.clip_norm"),
            seed=cfg.get_int("train.seed"),
            augment=cfg.get_bool("train.augment"),
            checkpoint_each_epoch=cfg.get_bool("train.checkpoint_each_epoch"),
        )


# ---------------------------------------------------------------------------
# checkpoint assembly
# ---------------------------------------------------------------------------

def checkpoint_entries(model, adam: ag.AdamState, next_epoch: int):
    entries = [(name, tensor.data) for name, tensor in model.parameters()]
    entries += list(model.state_arrays())
    entries += [(name, tensor.data) for name, tensor in model.frozen_tensors()]
    for name, _ in model.parameters():
        if name in adam.moments:
            m, v = adam.moments[name]
            entries.append((f"optim.m.{name}", m))
            entries.append((f"optim.v.{name}", v))
    entries.append(("optim.step", np.float64(adam.step)))
    entries.append(("optim.examples_seen", np.float64(adam.examples_seen)))
    entries.append(("trainer.next_epoch", np.float64(next_epoch)))
    return entries


def save_checkpoint(path, model, adam: ag.AdamState, next_epoch: int) -> None:
    ckpt.save(path, checkpoint_entries(model, adam, next_epoch))


def restore_model(model, entries: dict) -> None:
    for name, tensor in model.parameters():
        if name not in entries:
            raise ckpt.CheckpointError(f"checkpoint is missing parameter {name!r}")
        tensor.data = entries[name].reshape(tensor.data.shape).copy()
    for bn in model.batch_norms():
        for name, _ in bn.state_arrays():
            bn.load_state(name, entries[name])
    for name, tensor in model.frozen_tensors():
        tensor.data = entries[name].reshape(tensor.data.shape).copy()


def restore_training(model, adam: ag.AdamState, entries: dict) -> int:
    restore_model(model, entries)
    for name, _ in model.parameters():
        key_m, key_v = f"optim.m.{name}", f"optim.v.{name}"
        if key_m in entries:
            adam.moments[name] = (entries[key_m].copy(), entries[key_v].copy())
    adam.step = int(entries["optim.step"])
    adam.examples_seen = int(entries["optim.examples_seen"])
    return int(entries["trainer.next_epoch"])


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def evaluate(model, files, num_labels: int, frames_sampled: int,
             batch_size: int = 64) -> dict:
    """Deterministic pass over a split: GAP@20, mean loss, example count."""
    acc = GapAccumulator(top_k=20)
    loss_sum = 0.0
    count = 0
    for batch in batch_iterator(files, batch_size, num_labels, frames_sampled,
                                seed=0, shuffle=False):
        inputs = {"video": batch.video, "audio": batch.audio}
        probs = model.forward(inputs, training=False, example_ids=batch.ids)
        loss = ag.binary_cross_entropy_multilabel(probs, batch.targets)
        loss_sum += float(loss.data) * len(batch)
        count += len(batch)
        for row, truth in enumerate(batch.label_sets):
            preds = [(label, float(probs.data[row, label])) for label in range(num_labels)]
            acc.accumulate(preds, set(truth))
    return {"gap": acc.gap(), "loss": loss_sum / count, "examples": count}


def train(model, settings: TrainSettings, train_files, val_files, num_labels: int,
          frames_sampled: int, out_dir, resume=None, log=print) -> dict:
    """Run the training loop; writes train_log.csv, metrics.csv and checkpoints.

    Returns a summary with the final validation GAP/loss and the mean training
    loss of the last epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    adam = ag.AdamState(lr0=settings.lr, decay_rate=settings.decay_rate,
                        decay_every=settings.decay_every)
    first_epoch = 0
    if resume is not None:
        first_epoch = restore_training(model, adam, ckpt.load(resume))
        log(f"resumed from {resume} at epoch {first_epoch}")

    train_log = open(out_dir / "train_log.csv", "w", newline="")
    metrics_log = open(out_dir / "metrics.csv", "w", newline="")
    train_csv = csv.writer(train_log)
    metrics_csv = csv.writer(metrics_log)
    train_csv.writerow(["step", "epoch", "loss", "lr", "grad_norm",
                        "examples_seen", "examples_per_sec"])
    metrics_csv.writerow(["step", "split", "gap", "loss", "examples_seen"])

    step = adam.step
    epoch_losses = []
    last_eval = None
    current_epoch = first_epoch
    epoch_started = time.perf_counter()
    epoch_examples = 0

    def run_validation():
        nonlocal last_eval
        result = evaluate(model, val_files, num_labels, frames_sampled,
                          settings.batch_size)
        metrics_csv.writerow([step, "validation", f"{result['gap']:.6f}",
                              f"{result['loss']:.6f}", adam.examples_seen])
        metrics_log.flush()
        last_eval = result
        log(f"epoch {current_epoch}: validation gap {result['gap']:.4f} "
            f"loss {result['loss']:.4f}")
        return result

    def finish_epoch(next_epoch):
        nonlocal epoch_started, epoch_examples, epoch_losses, current_epoch
        run_validation()
        if settings.checkpoint_each_epoch:
            save_checkpoint(out_dir / f"checkpoint_epoch{current_epoch}.c1ck",
                            model, adam, current_epoch + 1)
        current_epoch = next_epoch
        epoch_started = time.perf_counter()
        epoch_examples = 0

    try:
        last_epoch_losses = []
        for batch in batch_iterator(train_files, settings.batch_size, num_labels,
                                    frames_sampled, seed=settings.seed,
                                    epochs=settings.epochs, first_epoch=first_epoch,
                                    augment=settings.augment):
            if batch.epoch != current_epoch:
                last_epoch_losses = epoch_losses
                epoch_losses = []
                finish_epoch(batch.epoch)
            ag.zero_grads(params)
            with ag.Tape() as tape:
                probs = model.forward({"video": batch.video, "audio": batch.audio},
                                      training=True, example_ids=batch.ids,
                                      epoch=batch.epoch)
                loss = ag.binary_cross_entropy_multilabel(probs, batch.targets)
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
                tape.backward(loss)
            try:
                grad_norm = ag.adam_step(adam, params, clip_norm=settings.clip_norm,
                                         examples=len(batch))
            except ag.NonFiniteGradientError as exc:
                raise TrainingDivergedError(str(exc)) from exc
            step += 1
            epoch_losses.append(loss_value)
            epoch_examples += len(batch)
            elapsed = time.perf_counter() - epoch_started
            train_csv.writerow([step, batch.epoch, f"{loss_value:.6f}",
                                f"{adam.effective_lr():.8f}", f"{grad_norm:.6f}",
                                adam.examples_seen,
                                f"{epoch_examples / max(elapsed, 1e-9):.1f}"])
        if epoch_losses:
            last_epoch_losses = epoch_losses
        run_validation()
        save_checkpoint(out_dir / "checkpoint_final.c1ck", model, adam,
                        settings.epochs)
    finally:
        train_log.close()
        metrics_log.close()

    return {
        "final_gap": last_eval["gap"],
        "final_val_loss": last_eval["loss"],
        "final_train_loss": float(np.mean(last_epoch_losses)) if last_epoch_losses else None,
        "steps": step,
        "examples_seen": adam.examples_seen,
        "checkpoint": str(out_dir / "checkpoint_final.c1ck"),
    }
