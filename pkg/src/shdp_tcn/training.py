"""Mini-batch training, forecast metrics and the trend-class protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence, Union

import jsonschema
import numpy as np

from . import tensor as T
from .data import WindowSample
from .model import ConfigError, ShdpTcnModel, assemble_input
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

RISE, FALL, STABLE = "rise", "fall", "stable"
CLASSES = (RISE, FALL, STABLE)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0
    loss: str = "mse"

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer", "must be 'adam' or 'sgd'")
        if self.loss != "mse":
            raise ConfigError("loss", "only 'mse' is supported")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown training setting")
        return cls(**doc).validate()


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate)
    return Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared difference; ``target`` may be a Tensor or array-like."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: length mismatch {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.mean(T.mul(diff, diff))


def train(model: ShdpTcnModel, samples: Sequence[WindowSample],
          config: TrainConfig = TrainConfig()) -> list[float]:
    """Fit ``model`` by mini-batch descent on MSE; returns per-epoch mean loss."""
    config.validate()
    if not samples:
        raise ValueError("training set is empty")
    cfg = model.config
    inputs = [assemble_input(s.heat_window, s.topic_feature, cfg) for s in samples]
    targets = np.array([s.target for s in samples])
    params = model.parameters()
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.shuffle_seed)
    history = []
    model.train()
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(samples))
            total = 0.0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start : start + config.batch_size]
                model.zero_grad()
                with Tape() as tape:
                    preds = T.stack([model(inputs[i]) for i in idx])
                    loss = mse_loss(preds, targets[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, b, value)
                tape.backward(loss)
                opt.step()
                total += value * len(idx)
            history.append(total / len(samples))
            log.debug("epoch %d loss %.6g", epoch, history[-1])
    finally:
        model.eval()
    return history


# --- trend protocol and metrics ----------------------------------------------

def trend_label(prev: float, cur: float, epsilon: float) -> str:
    if abs(cur - prev) <= epsilon:
        return STABLE
    return RISE if cur > prev else FALL


def trend_labels(values: Sequence[float], epsilon: float) -> list[str]:
    """Label each consecutive step rise, fall or stable (``|delta| <= epsilon``)."""
    v = list(values)
    if len(v) < 2:
        raise ValueError("trend_labels needs at least two values")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return [trend_label(a, b, epsilon) for a, b in zip(v, v[1:])]


@dataclass
class ClassificationReport:
    classes: list
    confusion: list  # confusion[i][j]: true class i predicted as class j
    precision: dict
    recall: dict
    f1: dict
    support: dict
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float


def classification_metrics(pred_labels: Sequence[str], true_labels: Sequence[str],
                           classes: Sequence[str] = CLASSES) -> ClassificationReport:
    """Per-class and macro precision/recall/F1 from the confusion matrix.

    Empty denominators give 0. Macro averages run over classes with non-zero
    true support only.
    """
    if len(pred_labels) != len(true_labels):
        raise ValueError(f"label length mismatch: {len(pred_labels)} vs {len(true_labels)}")
    if not pred_labels:
        raise ValueError("need at least one label")
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(pred_labels, true_labels):
        cm[pos[t], pos[p]] += 1

    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros(len(classes)), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros(len(classes)), where=true_tot > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(len(classes)), where=denom > 0)
    present = true_tot > 0

    def macro(x):
        return float(x[present].mean()) if present.any() else 0.0

    return ClassificationReport(
        classes=classes,
        confusion=cm.tolist(),
        precision=dict(zip(classes, prec.tolist())),
        recall=dict(zip(classes, rec.tolist())),
        f1=dict(zip(classes, f1.tolist())),
        support=dict(zip(classes, true_tot.tolist())),
        macro_precision=macro(prec),
        macro_recall=macro(rec),
        macro_f1=macro(f1),
        accuracy=float(tp.sum() / cm.sum()),
    )


@dataclass
class ForecastMetrics:
    mse: float
    mae: float
    classification: ClassificationReport


@dataclass
class EvalReport:
    name: str
    n_samples: int
    epsilon: float
    model: ForecastMetrics
    baselines: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


Predictor = Union[ShdpTcnModel, Callable[[WindowSample], float]]


def predict_samples(model: Predictor, samples: Sequence[WindowSample]) -> np.ndarray:
    if isinstance(model, ShdpTcnModel):
        model.eval()
        cfg = model.config
        return np.array([model(assemble_input(s.heat_window, s.topic_feature, cfg)).item()
                         for s in samples])
    return np.array([float(model(s)) for s in samples])


def forecast_metrics(preds, samples: Sequence[WindowSample], epsilon: float) -> ForecastMetrics:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.array([s.target for s in samples])
    last = np.array([s.heat_window[-1] for s in samples])
    err = preds - targets
    true_labels = [trend_label(a, b, epsilon) for a, b in zip(last, targets)]
    pred_labels = [trend_label(a, b, epsilon) for a, b in zip(last, preds)]
    return ForecastMetrics(
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        classification=classification_metrics(pred_labels, true_labels),
    )


def persistence(sample: WindowSample) -> float:
    return float(sample.heat_window[-1])


def seasonal_naive(sample: WindowSample) -> float:
    if sample.seasonal_value is None:
        raise ValueError(f"no value 12 months before {sample.target_month}")
    return sample.seasonal_value


def evaluate(model: Predictor, samples: Sequence[WindowSample], epsilon: float,
             name: str = "SHDP-TCN") -> EvalReport:
    """One-step-ahead metrics for ``model`` and the naive baselines on the
    same samples (normalised scale). Seasonal-naive is skipped when some
    target has no value 12 months earlier."""
    if not samples:
        raise ValueError("test set is empty")
    report = EvalReport(name, len(samples), float(epsilon),
                        forecast_metrics(predict_samples(model, samples), samples, epsilon))
    report.baselines["persistence"] = forecast_metrics(
        predict_samples(persistence, samples), samples, epsilon)
    if all(s.seasonal_value is not None for s in samples):
        report.baselines["seasonal-naive"] = forecast_metrics(
            predict_samples(seasonal_naive, samples), samples, epsilon)
    return report


_METRICS_SCHEMA = {
    "type": "object",
    "required": ["mse", "mae", "classification"],
    "properties": {
        "mse": {"type": "number", "minimum": 0},
        "mae": {"type": "number", "minimum": 0},
        "classification": {
            "type": "object",
            "required": ["classes", "confusion", "precision", "recall", "f1", "support",
                         "macro_precision", "macro_recall", "macro_f1", "accuracy"],
            "properties": {
                "classes": {"type": "array", "items": {"type": "string"}},
                "confusion": {"type": "array",
                              "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
                "precision": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                "recall": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                "f1": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                "support": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
                "macro_precision": {"type": "number", "minimum": 0, "maximum": 1},
                "macro_recall": {"type": "number", "minimum": 0, "maximum": 1},
                "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
                "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "n_samples", "epsilon", "model", "baselines"],
    "properties": {
        "name": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 1},
        "epsilon": {"type": "number", "minimum": 0},
        "model": _METRICS_SCHEMA,
        "baselines": {"type": "object", "additionalProperties": _METRICS_SCHEMA},
    },
}


class ReportSchemaError(ValueError):
    pass


def validate_report(doc: dict) -> None:
    """Check ``doc`` against REPORT_SCHEMA; raises ReportSchemaError."""
    try:
        jsonschema.validate(doc, REPORT_SCHEMA)
    except jsonschema.ValidationError as err:
        path = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ReportSchemaError(f"report invalid at {path}: {err.message}") from None


def report_from_dict(doc: dict) -> EvalReport:
    def metrics(d):
        return ForecastMetrics(d["mse"], d["mae"], ClassificationReport(**d["classification"]))

    return EvalReport(doc["name"], doc["n_samples"], doc["epsilon"], metrics(doc["model"]),
                      {k: metrics(v) for k, v in doc["baselines"].items()})


def format_comparison_table(rows: Sequence[tuple]) -> str:
    """Render ``(name, without_topic, with_topic)`` rows, each side a
    ClassificationReport or None, as a precision/recall/F1 grid split into
    "exclude" and "include" topic-feature column groups."""
    name_w = max([len("Model")] + [len(r[0]) for r in rows])
    head1 = f"{'':<{name_w}}  {'Exclude Thematic Features':^26}  {'Include Thematic Features':^26}"
    cols = f"{'precision':>9} {'recall':>7} {'F1':>8}"
    head2 = f"{'Model':<{name_w}}  {cols}  {cols}"
    lines = [head1, head2, "-" * len(head2)]

    def cells(rep):
        if rep is None:
            return f"{'-----':>9} {'-----':>7} {'-----':>8}"
        return f"{rep.macro_precision:>9.4f} {rep.macro_recall:>7.4f} {rep.macro_f1:>8.4f}"

    for name, without, with_ in rows:
        lines.append(f"{name:<{name_w}}  {cells(without)}  {cells(with_)}")
    return "\n".join(lines)


def report_table(report: EvalReport, with_topics: bool,
                 extra: Sequence[tuple[str, EvalReport, bool]] = ()) -> str:
    """Comparison table for one evaluation: baselines, optional extra models
    (each placed by its own flag), then the evaluated model."""
    rows = []

    def place(name, cls, topics):
        rows.append((name, None, cls) if topics else (name, cls, None))

    for bname, m in report.baselines.items():
        place(bname, m.classification, with_topics)
    for name, rep, topics in extra:
        place(name, rep.model.classification, topics)
    place(report.name, report.model.classification, with_topics)
    return format_comparison_table(rows)
