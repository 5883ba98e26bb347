"""Local training, evaluation and the sequential federated workflow.

The model is a single linear layer with either a sigmoid head (trained on
binary cross-entropy) or a ReLU head (trained on a squared hinge surrogate
of the pre-activation score). The federation is strictly sequential: the
coordinator evaluates, ships the model to one hospital, gets it back, and
moves on to the next.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .agent import UntrustedConnection
from .transport import TransportError

if TYPE_CHECKING:
    from .agent import Agent

ACTIVATIONS = ("sigmoid", "relu")
_HEADER = struct.Struct("<BI")
_BIAS = struct.Struct("<d")


class FLError(Exception):
    pass


class DimensionMismatch(FLError, ValueError):
    pass


class NonFiniteLoss(FLError, ArithmeticError):
    pass


class EmptyMatrix(FLError, ValueError):
    pass


class MalformedPayload(FLError, ValueError):
    pass


class TooFewRows(FLError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("features must be n x d and labels length n")
        if len(y) == 0:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain missing or non-finite values")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be binary")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.features[index], self.labels[index])


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    bias: float = 0.0
    activation: str = "sigmoid"

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @classmethod
    def zeros(cls, d: int, activation: str = "sigmoid") -> "ModelParams":
        return cls(np.zeros(d), 0.0, activation)

    @property
    def d(self) -> int:
        return len(self.weights)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and math.isfinite(self.bias))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return serialize_model(self) == serialize_model(other)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    train_fraction: float = 1 / 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning rate and batch size must be positive, epochs non-negative")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        return cls(float(doc["learning_rate"]), int(doc["epochs"]), int(doc["batch_size"]),
                   float(doc["train_fraction"]), int(doc["seed"]))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_dims(model: ModelParams, data: Dataset) -> None:
    if model.d != data.d:
        raise DimensionMismatch(f"model has {model.d} weights, data has {data.d} features")


def loss_and_gradient(
    weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray, activation: str = "sigmoid"
) -> Tuple[float, np.ndarray, float]:
    """Mean batch loss and its gradient with respect to (weights, bias)."""
    z = x @ weights + bias
    if activation == "sigmoid":
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        residual = sigmoid(z) - y
    else:
        signed = 2.0 * y - 1.0
        margin = np.maximum(0.0, 1.0 - signed * z)
        loss = float(np.mean(margin**2))
        residual = -2.0 * margin * signed
    grad_w = x.T @ residual / len(y)
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def train_local(model: ModelParams, data: Dataset, cfg: TrainConfig) -> ModelParams:
    """Mini-batch gradient descent over a seeded subset of ``data``.

    ``max(1, floor(train_fraction * n))`` rows are drawn once; every epoch
    reshuffles them and steps through batches of ``batch_size``.
    """
    _check_dims(model, data)
    if cfg.epochs == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    n_used = max(1, int(math.floor(cfg.train_fraction * data.n + 1e-9)))
    rows = rng.permutation(data.n)[:n_used]
    w = model.weights.copy()
    b = model.bias
    for _ in range(cfg.epochs):
        order = rng.permutation(rows)
        for start in range(0, n_used, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, gw, gb = loss_and_gradient(w, b, data.features[batch], data.labels[batch], model.activation)
            if not math.isfinite(loss):
                raise NonFiniteLoss("training diverged")
            w -= cfg.learning_rate * gw
            b -= cfg.learning_rate * gb
    if not (np.all(np.isfinite(w)) and math.isfinite(b)):
        raise NonFiniteLoss("training produced non-finite parameters")
    return ModelParams(w, b, model.activation)


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    # sigmoid(z) > 0.5 and relu(z) > 0 both reduce to z > 0; a tie is negative
    z = features @ model.weights + model.bias
    return (z > 0.0).astype(np.int64)


def evaluate(model: ModelParams, data: Dataset) -> ConfusionMatrix:
    _check_dims(model, data)
    pred = predict(model, data.features)
    y = data.labels
    return ConfusionMatrix(
        tp=int(np.sum((pred == 1) & (y == 1))),
        fp=int(np.sum((pred == 1) & (y == 0))),
        tn=int(np.sum((pred == 0) & (y == 0))),
        fn=int(np.sum((pred == 0) & (y == 1))),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def serialize_model(model: ModelParams) -> bytes:
    """Activation tag (u8), weight count (u32), weights (f64), bias (f64); all little-endian."""
    if not model.is_finite():
        raise ValueError("refusing to serialize a non-finite model")
    tag = ACTIVATIONS.index(model.activation)
    return _HEADER.pack(tag, model.d) + model.weights.astype("<f8").tobytes() + _BIAS.pack(model.bias)


def deserialize_model(data: bytes) -> ModelParams:
    if len(data) < _HEADER.size + _BIAS.size:
        raise MalformedPayload("model payload too short")
    tag, d = _HEADER.unpack_from(data)
    if tag >= len(ACTIVATIONS):
        raise MalformedPayload(f"unknown activation tag {tag}")
    if len(data) != _HEADER.size + 8 * d + _BIAS.size:
        raise MalformedPayload("model payload length does not match its weight count")
    weights = np.frombuffer(data, dtype="<f8", count=d, offset=_HEADER.size).astype(np.float64)
    (bias,) = _BIAS.unpack_from(data, _HEADER.size + 8 * d)
    model = ModelParams(weights, bias, ACTIVATIONS[tag])
    if not model.is_finite():
        raise MalformedPayload("model payload holds non-finite values")
    return model


def partition_dataset(full: Dataset, n_parties: int, seed: int) -> Tuple[List[Dataset], Dataset]:
    """Shuffle, cut a validation slice of floor(n / (k+1)) rows, split the rest k ways."""
    if n_parties < 1:
        raise ValueError("need at least one party")
    if full.n <= n_parties + 1:
        raise TooFewRows(f"{full.n} rows cannot feed {n_parties} parties plus validation")
    perm = np.random.default_rng(seed).permutation(full.n)
    n_val = full.n // (n_parties + 1)
    validation = full.subset(perm[:n_val])
    rest = perm[n_val:]
    base, extra = divmod(len(rest), n_parties)
    parts, start = [], 0
    for i in range(n_parties):
        size = base + (1 if i < extra else 0)
        parts.append(full.subset(rest[start:start + size]))
        start += size
    return parts, validation


def synthetic_dataset(seed: int, n: int, d: int, separation: float) -> Dataset:
    """Two unit-variance Gaussian clusters at +/- separation along the diagonal."""
    if n <= 0 or d <= 0:
        raise ValueError("n and d must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    direction = np.ones(d) / math.sqrt(d)
    centers = np.outer((2.0 * labels - 1.0) * separation, direction)
    return Dataset(centers + rng.standard_normal((n, d)), labels)


_TRUE = {"1", "yes", "true", "y", "t"}
_FALSE = {"0", "no", "false", "n", "f"}
_MISSING = {"", "na", "nan", "null", "none"}


def _as_float(text: str) -> Optional[float]:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(path, label_column: Optional[str] = None) -> Dataset:
    """Load a headered CSV; the label is ``label_column`` or the final column.

    Numeric columns pass through, other columns are one-hot encoded, and
    rows with a missing field are dropped. Labels accept 0/1, yes/no and
    true/false spellings.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        rows = [r for r in reader if len(r) == len(header)]
    label_idx = header.index(label_column) if label_column else len(header) - 1
    rows = [[c.strip() for c in r] for r in rows if not any(c.strip().lower() in _MISSING for c in r)]
    labels = []
    kept = []
    for r in rows:
        raw = r[label_idx].lower()
        if raw in _TRUE:
            labels.append(1)
        elif raw in _FALSE:
            labels.append(0)
        else:
            continue
        kept.append(r)
    if not kept:
        raise ValueError(f"{path}: no usable rows")
    columns: List[np.ndarray] = []
    for j, _name in enumerate(header):
        if j == label_idx:
            continue
        values = [r[j] for r in kept]
        numbers = [_as_float(v) for v in values]
        if all(v is not None for v in numbers):
            columns.append(np.array(numbers, dtype=np.float64)[:, None])
        else:
            categories = sorted(set(v.lower() for v in values))
            lookup = {c: i for i, c in enumerate(categories)}
            onehot = np.zeros((len(values), len(categories)))
            onehot[np.arange(len(values)), [lookup[v.lower()] for v in values]] = 1.0
            columns.append(onehot)
    features = np.hstack(columns) if columns else np.zeros((len(kept), 0))
    return Dataset(features, np.array(labels))


def write_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(data.d)] + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


class RoundResult(NamedTuple):
    round: int
    matrix: ConfusionMatrix


def rounds_csv(rounds: Sequence[RoundResult]) -> str:
    buf = io.StringIO()
    buf.write("round,tp,fp,tn,fn,accuracy\n")
    for r, cm in rounds:
        buf.write(f"{r},{cm.tp},{cm.fp},{cm.tn},{cm.fn},{accuracy(cm):.6f}\n")
    return buf.getvalue()


def round_seed(cfg: TrainConfig, round_index: int) -> TrainConfig:
    """Per-round training config: the seed is offset by the round number."""
    return replace(cfg, seed=cfg.seed + round_index)


def attach_trainer(agent: "Agent", data: Dataset) -> None:
    """Let ``agent`` answer model messages by training on its local ``data``."""

    def train(payload: bytes, config: dict) -> bytes:
        model = deserialize_model(payload)
        return serialize_model(train_local(model, data, TrainConfig.from_json(config)))

    agent.dataset = data
    agent.model_trainer = train


class FederationResult(list):
    """Per-round confusion matrices plus how the run ended."""

    def __init__(self, rounds=(), final_model: Optional[ModelParams] = None) -> None:
        super().__init__(rounds)
        self.final_model = final_model
        self.excluded: List[str] = []
        self.partial = False
        self.error: Optional[str] = None


def run_federation(
    researcher: "Agent",
    hospitals: Sequence["Agent"],
    initial: ModelParams,
    cfg: TrainConfig,
    validation: Dataset,
    skip_untrusted: bool = False,
    before_round: Optional[Callable[[int, "Agent"], None]] = None,
    timeout: float = 30.0,
) -> FederationResult:
    """Sequential federation: evaluate, hand the model to each hospital in turn.

    Round 0 is the untrained model. Hospital ``i`` (1-based) trains with
    seed ``cfg.seed + i`` and its result is evaluated as round ``i``. Any
    hospital whose connection is not trusted when its turn comes is either
    an error (the default, raised before any model bytes leave) or, with
    ``skip_untrusted``, left out and listed in ``excluded``.
    """
    connections = [researcher.connection_to(h).connection_id for h in hospitals]
    if not skip_untrusted:
        untrusted = [h.name for h, cid in zip(hospitals, connections) if not researcher.is_trusted(cid)]
        if untrusted:
            raise UntrustedConnection(f"not trusted: {', '.join(untrusted)}")
    _check_dims(initial, validation)
    model = initial
    result = FederationResult([RoundResult(0, evaluate(model, validation))], model)
    for i, (hospital, cid) in enumerate(zip(hospitals, connections), start=1):
        if before_round is not None:
            before_round(i, hospital)
        if not researcher.is_trusted(cid):
            if not skip_untrusted:
                raise UntrustedConnection(f"{hospital.name} is no longer trusted")
            result.excluded.append(hospital.name)
            continue
        seen = len(researcher.model_inbox)
        try:
            researcher.send_model(cid, serialize_model(model), i, round_seed(cfg, i).to_json())
        except TransportError as exc:
            result.partial, result.error = True, f"{hospital.name}: {exc}"
            break
        researcher.transport.wait_idle(timeout)
        reply = next((m for m in researcher.model_inbox[seen:] if m["connection_id"] == cid and m["round"] == i), None)
        if reply is None:
            result.partial, result.error = True, f"{hospital.name}: no model returned"
            break
        model = deserialize_model(reply["model"])
        result.append(RoundResult(i, evaluate(model, validation)))
        result.final_model = model
    return result
