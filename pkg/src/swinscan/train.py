"""Training loop and evaluation.

One optimizer step is forward, cross-entropy, backward, then a
decoupled-weight-decay adaptive-moment update.  Everything downstream
of the config seed is deterministic, so identical configs reproduce
identical weights bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import metrics as MX
from . import model as M
from . import tensor as T
from .errors import (
    ConfigurationError,
    DivergedTrainingError,
    EmptyInputError,
    NonFiniteError,
)
from .model import load_weights, save_weights  # re-exported trainer API

__all__ = [
    "TrainConfig", "EpochMetrics", "AdamW", "train", "evaluate",
    "log_epoch_metrics", "save_weights", "load_weights",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    mean_loss: float
    accuracy: float
    precision: float
    recall: float
    f1: float


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay is applied uniformly to every parameter, norm scales and
    biases included; at this model scale the simplicity is worth more
    than the customary no-decay list.
    """

    def __init__(self, params, config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        # overflow surfaces as a non-finite loss on the next forward pass
        with np.errstate(over="ignore", invalid="ignore"):
            for i, p in enumerate(self.params):
                g = p.grad
                if g is None:
                    continue
                self._m[i] = c.beta1 * self._m[i] + (1.0 - c.beta1) * g
                self._v[i] = c.beta2 * self._v[i] + (1.0 - c.beta2) * g * g
                m_hat = self._m[i] / bc1
                v_hat = self._v[i] / bc2
                p.data = p.data - c.learning_rate * (
                    m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * p.data
                )

    def zero_grads(self):
        for p in self.params:
            p.grad = None


def _check_task(weights: M.ModelWeights, samples):
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise ConfigurationError(f"mixed tasks in sample set: {sorted(tasks)}")
    task = tasks.pop()
    classes = len(D.classes_for_task(task))
    if classes != weights.config.num_classes:
        raise ConfigurationError(
            f"task {task!r} has {classes} classes but the model head has "
            f"{weights.config.num_classes}"
        )
    return task


def train(
    weights: M.ModelWeights,
    samples,
    config: TrainConfig,
    eval_samples=None,
    preprocess: D.PreprocessConfig = D.DEFAULT_PREPROCESS,
):
    """Optimize weights in place; returns (weights, history).

    Per-epoch metrics are computed on eval_samples when given, else on
    the training samples themselves.
    """
    if not samples:
        raise EmptyInputError("no training samples")
    _check_task(weights, samples)
    rng = np.random.default_rng(config.seed)
    params = weights.tensors()  # path-sorted, so update order is fixed
    opt = AdamW(params, config)
    history = []
    global_step = 0
    for epoch in range(1, config.epochs + 1):
        batches = D.make_batches(samples, config.batch_size, rng)
        losses = []
        for batch in batches:
            global_step += 1
            opt.zero_grads()
            images = D.normalize(batch.images, preprocess)
            try:
                with T.Tape() as tape:
                    logits = M.forward_batch(images, weights.config, weights)
                    loss = T.cross_entropy(logits, batch.labels)
                T.backward(tape, loss)
            except NonFiniteError as exc:
                raise DivergedTrainingError(global_step, str(exc)) from exc
            losses.append(loss.item())
            opt.step()
        _, report = evaluate(weights, eval_samples or samples, preprocess=preprocess)
        history.append(
            EpochMetrics(
                epoch=epoch,
                steps=len(batches),
                mean_loss=float(np.mean(losses)),
                accuracy=_defined(report.accuracy),
                precision=_defined(report.ppv),
                recall=_defined(report.sensitivity),
                f1=_defined(report.f1),
            )
        )
    return weights, history


def _defined(rate) -> float:
    # epoch CSVs need numbers; an undefined rate logs as 0.0
    return 0.0 if rate is None else float(rate)


def predict_labels(weights: M.ModelWeights, samples,
                   preprocess: D.PreprocessConfig = D.DEFAULT_PREPROCESS,
                   chunk: int = 32):
    """Argmax class ids for samples, in order."""
    out = []
    for at in range(0, len(samples), chunk):
        part = samples[at : at + chunk]
        images = np.stack([D.normalize(s.image, preprocess) for s in part])
        logits = M.forward_batch(images, weights.config, weights)
        out.extend(int(i) for i in np.argmax(logits.data, axis=1))
    return out


def evaluate(weights, samples, predict_fn=None,
             preprocess: D.PreprocessConfig = D.DEFAULT_PREPROCESS):
    """Confusion matrix plus the nine-measure report over samples.

    predict_fn overrides the model: it maps a Sample to a class id
    (used for oracle baselines in tests).
    """
    samples = list(samples)
    if not samples:
        raise EmptyInputError("cannot evaluate an empty sample set")
    k = len(D.classes_for_task(samples[0].task))
    if predict_fn is not None:
        predicted = [int(predict_fn(s)) for s in samples]
    else:
        _check_task(weights, samples)
        predicted = predict_labels(weights, samples, preprocess)
    actual = [s.label for s in samples]
    cm = MX.confusion_from_predictions(actual, predicted, k)
    return cm, MX.report_from_confusion(cm)


def log_epoch_metrics(history, path: str) -> None:
    """Write the epoch history as CSV; floats carry 9 decimals so a
    parse-back stays within 1e-9 of the originals."""
    if not history:
        raise EmptyInputError("no epochs to log")
    lines = ["epoch,steps,mean_loss,accuracy,precision,recall,f1"]
    for em in history:
        lines.append(
            f"{em.epoch},{em.steps},{em.mean_loss:.9f},{em.accuracy:.9f},"
            f"{em.precision:.9f},{em.recall:.9f},{em.f1:.9f}"
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_epoch_metrics(path: str):
    """Parse a CSV written by log_epoch_metrics."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or lines[0] != "epoch,steps,mean_loss,accuracy,precision,recall,f1":
        raise EmptyInputError(f"{path} is not an epoch metrics CSV")
    history = []
    for ln in lines[1:]:
        parts = ln.split(",")
        history.append(
            EpochMetrics(
                epoch=int(parts[0]),
                steps=int(parts[1]),
                mean_loss=float(parts[2]),
                accuracy=float(parts[3]),
                precision=float(parts[4]),
                recall=float(parts[5]),
                f1=float(parts[6]),
            )
        )
    return history
