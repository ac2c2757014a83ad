"""Training loop, evaluation, checkpoints and run reports.

Mini-batch SGD with Nesterov momentum; the learning rate drops by 10x at
each milestone epoch. Gradients are accumulated per sample and averaged
over the batch. Everything is deterministic under a fixed seed: the
shuffle stream is seeded independently of initialization, and the metrics
report contains no wall-clock data (timing is reported separately), so two
identical runs serialize to identical bytes.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .models import Model, ModelSpec
from .tensor_ops import Array


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the (epoch, batch, lr) diagnostic."""

    def __init__(self, epoch: int, batch: int, lr: float):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:g}"
        )
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for one run.

    Defaults are tuned for the synthetic task without batch norm: small
    batches give enough optimizer steps per epoch, lr 0.01 keeps the
    momentum updates stable, and the decay milestones sit late (0.8/0.9 of
    the budget) so the gated variants finish converging first.
    """

    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    milestones: tuple[int, ...] = (16, 18)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    augment_shift: int = 0  # random horizontal shift in +-px; 0 keeps runs augmentation-free
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.augment_shift < 0:
            raise ValueError("augment_shift must be >= 0")
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ValueError("milestones must be < epochs")

    @staticmethod
    def for_epochs(epochs: int, **overrides) -> "TrainConfig":
        """Default schedule scaled to an epoch budget: drops at 0.8 and 0.9."""
        milestones = tuple(sorted({(4 * epochs) // 5, (9 * epochs) // 10}))
        milestones = tuple(m for m in milestones if 0 < m < epochs)
        return TrainConfig(epochs=epochs, milestones=milestones, **overrides)


@dataclass
class RunReport:
    """Everything a finished run reports.

    ``epoch_seconds`` is intentionally excluded from :meth:`metrics_dict`
    so identical runs produce byte-identical metrics files.
    """

    model: dict
    config: dict
    epoch_records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    epoch_seconds: list[float] = field(default_factory=list)

    def metrics_dict(self) -> dict:
        return {
            "model": self.model,
            "config": self.config,
            "epochs": self.epoch_records,
            "final": self.final,
        }

    def metrics_json(self) -> str:
        return json.dumps(self.metrics_dict(), sort_keys=True, indent=2) + "\n"

    def timing_dict(self) -> dict:
        return {"epoch_seconds": self.epoch_seconds}


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Initial lr decayed by 10x per milestone already passed (0-based epoch)."""
    return cfg.lr * 0.1 ** sum(epoch >= m for m in cfg.milestones)


def shift_horizontal(image: Array, dx: int) -> Array:
    """Shift a C x H x W image by dx columns, zero-filling the vacated strip."""
    if dx == 0:
        return image
    out = np.zeros_like(image)
    if dx > 0:
        out[:, :, dx:] = image[:, :, :-dx]
    else:
        out[:, :, :dx] = image[:, :, -dx:]
    return out


def evaluate(model: Model, images: Array, labels: np.ndarray, num_classes: int) -> dict:
    """Top-1 error (and top-5 when there are more than 5 classes); no augmentation."""
    n = len(images)
    top1_wrong = 0
    top5_wrong = 0
    for image, label in zip(images, labels):
        scores = model.predict(image)
        if int(scores.argmax()) != label:
            top1_wrong += 1
        if num_classes > 5:
            top5 = np.argsort(scores)[-5:]
            if label not in top5:
                top5_wrong += 1
    metrics = {"n": n, "top1_error": top1_wrong / n}
    if num_classes > 5:
        metrics["top5_error"] = top5_wrong / n
    return metrics


def train(model: Model, dataset: Dataset, cfg: TrainConfig) -> RunReport:
    """Run the full schedule and return the report; model is updated in place."""
    params = model.parameters()
    state = ad.OptimizerState(
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        nesterov=cfg.nesterov,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
    report = RunReport(model=asdict(model.spec), config=asdict(cfg))

    n_train = len(dataset.train_images)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at_epoch(cfg, epoch)
        order = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        for batch_idx, start in enumerate(range(0, n_train, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            ad.zero_grad(params)
            batch_loss = 0.0
            for sample_idx in batch:
                image = dataset.train_images[sample_idx]
                if cfg.augment_shift:
                    dx = int(shuffle_rng.integers(-cfg.augment_shift, cfg.augment_shift + 1))
                    image = shift_horizontal(image, dx)
                logits = model.forward(image)
                loss = ad.softmax_cross_entropy(logits, int(dataset.train_labels[sample_idx]))
                ad.backward(loss)
                batch_loss += float(loss.value)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch_idx, state.lr)
            scale = 1.0 / len(batch)
            grads = [p.grad * scale for p in params]
            ad.sgd_step([p.value for p in params], grads, state)
            epoch_loss += batch_loss
        train_metrics = evaluate(model, dataset.train_images, dataset.train_labels,
                                 dataset.num_classes)
        test_metrics = evaluate(model, dataset.test_images, dataset.test_labels,
                                dataset.num_classes)
        record = {
            "epoch": epoch,
            "lr": state.lr,
            "train_loss": epoch_loss / n_train,
            "train_top1_error": train_metrics["top1_error"],
            "test_top1_error": test_metrics["top1_error"],
        }
        if "top5_error" in test_metrics:
            record["test_top5_error"] = test_metrics["top5_error"]
        report.epoch_records.append(record)
        report.epoch_seconds.append(time.perf_counter() - t0)

    last = report.epoch_records[-1]
    report.final = {
        "train_loss": last["train_loss"],
        "train_top1_error": last["train_top1_error"],
        "test_top1_error": last["test_top1_error"],
        "param_count": model.param_count(),
    }
    if "test_top5_error" in last:
        report.final["test_top5_error"] = last["test_top5_error"]
    return report


# ---------------------------------------------------------------------------
# checkpoints: an npz archive of name -> float64 array, plus the model spec
# embedded as JSON under the reserved key "_spec_json".


def save_checkpoint(path, model: Model) -> None:
    arrays = {name: node.value for name, node in model.named_parameters().items()}
    arrays["_spec_json"] = np.frombuffer(model.spec.to_json().encode(), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Model:
    with np.load(path) as archive:
        blob = bytes(archive["_spec_json"].tobytes()).decode()
        spec = ModelSpec.from_json(blob)
        model = Model(spec)
        state = {k: archive[k] for k in archive.files if k != "_spec_json"}
    model.load_state(state)
    return model
