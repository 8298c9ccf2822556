"""Mini-batch Adam trainer with cross-entropy loss."""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # list of (name, array) updated in place
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for _, p in params]
        self.v = [np.zeros_like(p) for _, p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for (name, p), g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                raise RuntimeError(f"no gradient for {name}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def predict(model, X, batch_size=128):
    """Logits in eval mode; the model's train/eval flag is restored afterwards."""
    was = model.training
    model.eval()
    out = [model(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    model.train(was)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))


def evaluate(model, X, y, batch_size=128):
    logits = predict(model, X, batch_size)
    loss, _ = cross_entropy(logits, y)
    return float(loss), float((logits.argmax(axis=1) == y).mean())


def fit(model, train, val=None, config=None, on_epoch=None):
    """Train ``model`` in place on ``train = (X, y)``.

    Returns a list of per-epoch dicts ``epoch, train_loss, train_acc,
    val_loss, val_acc`` (val fields are NaN without a validation set).
    Batches are drawn from a permutation seeded by ``config.seed``; the
    last partial batch is kept.
    """
    cfg = config or TrainConfig()
    X, y = train
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    params = list(model.named_parameters())
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(X))
        total_loss, correct = 0.0, 0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model(X[idx])
            loss, dlogits = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(lr={cfg.lr}); lower the learning rate")
            model.backward(dlogits)
            opt.step([g for _, g in model.named_grads()])
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        row = {"epoch": epoch, "train_loss": float(total_loss / len(X)), "train_acc": correct / len(X),
               "val_loss": float("nan"), "val_acc": float("nan")}
        if val is not None and len(val[0]):
            row["val_loss"], row["val_acc"] = evaluate(model, val[0], np.asarray(val[1]))
        log.info("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, row["train_loss"], row["train_acc"], row["val_loss"], row["val_acc"])
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history
