"""Plain SGD with weight decay, scheduled checkpoints and checkpoint files."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formats
from .data import Dataset, eval_loss, iter_batches
from .errors import FormatError, HashMismatchError, TrainingError
from .models import BnStats, ModelSpec, build_model
from .params import ParamVector
from .seeding import SHUFFLE, stream

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 128
    weight_decay: float = 5e-4
    epochs: int = 200
    checkpoint_epochs: tuple = (10, 50, 100)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "checkpoint_epochs", tuple(sorted(set(self.checkpoint_epochs))))

    def to_dict(self):
        d = asdict(self)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d


@dataclass
class Checkpoint:
    params: ParamVector
    bn: BnStats
    epoch: int
    seed: int
    spec: ModelSpec
    train_loss: float = float("nan")
    train_acc: float = float("nan")
    eval_loss: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def spec_hash(self) -> int:
        return self.spec.spec_hash()


def train(spec: ModelSpec, config: TrainConfig, dataset: Dataset, eval_dataset=None):
    """Run SGD and return checkpoints at epoch 0, each scheduled epoch and the last epoch.

    Update: ``theta <- theta - lr * (g + weight_decay * theta)``.
    """
    model, params, bn = build_model(spec, config.seed)
    shuffle = stream(SHUFFLE, config.seed)
    wanted = set(config.checkpoint_epochs) | {0, config.epochs}
    ckpts = []

    def snapshot(epoch, theta):
        tl, ta = eval_loss(model, theta, bn, dataset)
        el = eval_loss(model, theta, bn, eval_dataset)[0] if eval_dataset is not None else float("nan")
        ck = Checkpoint(theta, bn.copy(), epoch, config.seed, spec, tl, ta, el,
                        {"train_config": config.to_dict()})
        log.info("epoch %d: train loss %.4f acc %.4f", epoch, tl, ta)
        return ck

    ckpts.append(snapshot(0, params))
    last_good = ckpts[0]
    theta = params.values.copy()
    for epoch in range(1, config.epochs + 1):
        for batch in iter_batches(dataset, config.batch_size, shuffle):
            t = ad.parameter(theta)
            stats = {} if spec.use_bn else None
            with ad.Tape():
                try:
                    loss = model.loss_tensor(t, batch.inputs, batch.labels, bn, "batch", stats)
                except ArithmeticError:
                    loss = None
            if loss is None or not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}", last_good)
            g = ad.grad(loss, t).data
            theta = theta - config.lr * (g + config.weight_decay * theta)
            if stats:
                for name, (m, v) in stats.items():
                    rm, rv = bn.layers[name]
                    bn.layers[name] = ((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * m,
                                       (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * v)
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"non-finite parameters at epoch {epoch}", last_good)
        if epoch in wanted:
            ck = snapshot(epoch, params.like(theta))
            if not np.isfinite(ck.train_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", last_good)
            ckpts.append(ck)
            last_good = ck
    return ckpts


# ---------------------------------------------------------------- persistence

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {"kind": "checkpoint", "spec": ckpt.spec.to_dict(), "train_loss": ckpt.train_loss,
            "train_acc": ckpt.train_acc, "eval_loss": ckpt.eval_loss, "meta": ckpt.meta}
    return formats.encode(b"LMCK", ckpt.spec_hash, ckpt.epoch, ckpt.seed, meta,
                          ckpt.params.manifest, ckpt.params.values, ckpt.bn.layers)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    formats.atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path, spec: ModelSpec | None = None) -> Checkpoint:
    """Read a checkpoint; ``spec`` (if given) must hash-match the stored one."""
    rec = formats.decode(Path(path).read_bytes(), str(path), b"LMCK")
    stored = ModelSpec.from_dict(rec["meta"]["spec"])
    if stored.spec_hash() != rec["spec_hash"]:
        raise FormatError(f"{path}: embedded spec does not match header hash")
    if spec is not None and spec.spec_hash() != rec["spec_hash"]:
        raise HashMismatchError(f"{path}: checkpoint belongs to a different model spec")
    m = rec["meta"]
    return Checkpoint(ParamVector(rec["values"], rec["manifest"]), BnStats(rec["bn"]),
                      rec["epoch"], rec["seed"], stored, m["train_loss"], m["train_acc"],
                      m["eval_loss"], m.get("meta", {}))
