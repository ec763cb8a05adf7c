"""The periodic CNN: architecture, minibatch RMSprop training, prediction and persistence."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .domain import CongestionSeries, NormalizationParams, denormalize, normalize
from .evaluation import error_metrics
from .folding import FoldingConfig, build_instances, build_multistep_matrix
from .ingest import atomic_write_text
from .neuralnet import (
    ConvLayer,
    ConvNetModel,
    DenseLayer,
    DimensionError,
    RmspropState,
    l2_squared_loss,
    rmsprop_step,
)

MODEL_FORMAT = "pcnn-model"
MODEL_VERSION = 1
DTYPES = {"f64": np.float64, "f32": np.float32}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PcnnConfig:
    d: int = 9
    t: int = 6
    n_layers: int = 5
    filters: int = 64
    last_filters: int = 16
    kernel: int = 2
    learning_rate: float = 0.005
    l2_lambda: float = 0.001
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    rho: float = 0.9
    epsilon: float = 1e-8
    horizon: int = 1
    precision: str = "f64"
    train_days: int = 20
    val_days: int = 5
    test_days: int = 5

    def __post_init__(self):
        for name in ("d", "t", "n_layers", "filters", "last_filters", "kernel", "batch_size", "horizon",
                     "train_days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.val_days < 0 or self.test_days < 0:
            raise ValueError("epochs and split sizes must be non-negative")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        h, w = self.input_shape
        if self.n_layers * (self.kernel - 1) >= min(h, w):
            raise DimensionError(f"{self.n_layers} convolutions of size {self.kernel} do not fit a {h}x{w} input")

    @property
    def input_shape(self):
        return (self.d + 1, 2 * self.t)

    @property
    def folding(self) -> FoldingConfig:
        return FoldingConfig(self.d, self.t, self.horizon)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PcnnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes) -> "PcnnConfig":
        return dataclasses.replace(self, **changes)


def conv_shapes(config: PcnnConfig):
    """Spatial size after each convolution, e.g. 9x11 ... 5x7 for the default stack."""
    h, w = config.input_shape
    k = config.kernel - 1
    return [(h - k * i, w - k * i) for i in range(1, config.n_layers + 1)]


def flatten_size(config: PcnnConfig) -> int:
    h, w = conv_shapes(config)[-1]
    return h * w * config.last_filters


def build_model(config: PcnnConfig, rng: Optional[np.random.Generator] = None) -> ConvNetModel:
    """conv(1->filters), ..., conv(filters->last_filters), all ReLU; then flatten and a dense 1-output head."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    dtype = config.dtype
    layers = []
    in_ch = 1
    for i in range(config.n_layers):
        out_ch = config.last_filters if i == config.n_layers - 1 else config.filters
        layers.append(ConvLayer.init(rng, in_ch, out_ch, (config.kernel, config.kernel), "relu", dtype))
        in_ch = out_ch
    layers.append(DenseLayer.init(rng, flatten_size(config), 1, "identity", dtype))
    return ConvNetModel(layers, (1,) + config.input_shape)


def build_mlp(n_inputs: int, hidden: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> ConvNetModel:
    """Fully-connected ReLU stack with an identity single-output head."""
    layers = []
    n_in = n_inputs
    for width in hidden:
        layers.append(DenseLayer.init(rng, n_in, width, "relu", dtype))
        n_in = width
    layers.append(DenseLayer.init(rng, n_in, 1, "identity", dtype))
    return ConvNetModel(layers, (n_inputs,))


def compute_loss(predictions, targets, params: Union[ConvNetModel, Sequence[np.ndarray]], l2_lambda: float,
                 reduction: str = "mean") -> float:
    """Half squared error plus half-lambda squared norm of the given weights.

    Pass a model to penalise its weights only (biases excluded), or an explicit
    list of arrays to penalise exactly those.
    """
    if isinstance(params, ConvNetModel):
        sq = params.weight_sq_norm()
    else:
        sq = float(sum(np.sum(np.asarray(p, dtype=np.float64) ** 2) for p in params))
    return l2_squared_loss(predictions, targets, sq, l2_lambda, reduction)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.005
    l2_lambda: float = 0.001
    batch_size: int = 128
    epochs: int = 10
    rho: float = 0.9
    epsilon: float = 1e-8

    @classmethod
    def from_pcnn(cls, c: PcnnConfig) -> "OptimConfig":
        return cls(c.learning_rate, c.l2_lambda, c.batch_size, c.epochs, c.rho, c.epsilon)


def fit_network(model: ConvNetModel, x: np.ndarray, y: np.ndarray, optim: OptimConfig, rng: np.random.Generator,
                on_epoch: Optional[Callable[[int, ConvNetModel], None]] = None,
                order_keys: Optional[Sequence[np.ndarray]] = None) -> List[float]:
    """Minibatch RMSprop on the batch-mean loss; returns the per-epoch objective.

    Each epoch visits every instance once in a fresh random order drawn from
    `rng`; the recorded value is the batch-size-weighted mean of the batch
    objectives. With `order_keys` (arrays as for np.lexsort, last key primary)
    instances are first put in canonical order, so the batches depend on the
    seed alone and not on how the instances were listed. A non-finite loss
    aborts with TrainingError.
    """
    n = y.shape[0]
    if n == 0:
        raise TrainingError("empty training set")
    if order_keys is not None:
        canon = np.lexsort(tuple(order_keys))
        x, y = x[canon], y[canon]
    xp = model.prepare_input(x)
    y = np.asarray(y, dtype=model.dtype).reshape(-1)
    state = RmspropState(optim.learning_rate, optim.rho, optim.epsilon)
    params = model.params()
    losses = []
    for epoch in range(optim.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, optim.batch_size):
            idx = order[start:start + optim.batch_size]
            loss, grads = model.loss_and_grads(xp[idx], y[idx], optim.l2_lambda, prepared=True)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss {loss!r} at epoch {epoch}, batch starting {start}; "
                                    f"weight norm {model.weight_sq_norm():.3e}")
            rmsprop_step(params, grads, state)
            total += loss * idx.size
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return losses


@dataclass
class TrainReport:
    epoch_losses: List[float]
    val_mae: List[Optional[float]]
    val_rmse: List[Optional[float]]
    val_mre: List[Optional[float]]
    n_train: int
    n_val: int
    epochs: int
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, include_wall_time: bool = False):
        doc = dataclasses.asdict(self)
        if not include_wall_time:
            doc.pop("wall_time")
        return doc


@dataclass(frozen=True)
class DaySplit:
    train: range
    val: range
    test: range


def split_days(n_days: int, config: PcnnConfig) -> DaySplit:
    """Chronological split: first `train_days`, next `val_days`, then `test_days`."""
    need = config.train_days + config.val_days + config.test_days
    if n_days < need:
        raise ValueError(f"series has {n_days} days; the split needs {need}")
    a = config.train_days
    b = a + config.val_days
    return DaySplit(range(0, a), range(a, b), range(b, b + config.test_days))


@dataclass(eq=False)
class TrainedPcnn:
    """A network together with everything needed to predict: folding config and scaling."""

    model: ConvNetModel
    config: PcnnConfig
    normalization: NormalizationParams
    segment_ids: tuple

    def _normalized(self, series: CongestionSeries) -> np.ndarray:
        return normalize(series.values, self.normalization)

    def predict(self, series: CongestionSeries, m: int, n: int, u: int = 1):
        """(clamped, raw) denormalised prediction of c[m, n+u-1] from history before (m, n)."""
        view = series.with_values(self._normalized(series))
        mat = build_multistep_matrix(view, m, n, u, self.config.folding)
        raw = float(denormalize(float(self.model.predict(mat.values[None])[0]), self.normalization))
        return max(raw, 0.0), raw

    def predict_days(self, series: CongestionSeries, days: Sequence[int], u: Optional[int] = None,
                     batch: int = 1024):
        """Predictions for every eligible origin on `days`.

        Returns (days, origin slots, predicted clamped, observed, raw).
        """
        folding = self.config.folding if u is None else self.config.folding.with_horizon(u)
        inst = build_instances(series, folding, days, values=self._normalized(series))
        raw = np.empty(len(inst))
        for s in range(0, len(inst), batch):
            raw[s:s + batch] = self.model.predict(inst.matrices[s:s + batch])
        raw = denormalize(raw, self.normalization) if len(inst) else raw
        observed = series.values[inst.days, inst.target_slots] if len(inst) else np.empty(0)
        return inst.days, inst.slots, np.maximum(raw, 0.0), observed, raw

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "normalization": self.normalization.to_dict(),
            "segment_ids": list(self.segment_ids),
            "network": self.model.to_dict(),
        }

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, doc) -> "TrainedPcnn":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a saved PCNN model")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        config = PcnnConfig.from_dict(doc["config"])
        model = ConvNetModel.from_dict(doc["network"], config.dtype)
        norm = NormalizationParams(**doc["normalization"])
        return cls(model, config, norm, tuple(doc["segment_ids"]))

    @classmethod
    def load(cls, path) -> "TrainedPcnn":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _as_list(series_set) -> List[CongestionSeries]:
    if isinstance(series_set, CongestionSeries):
        return [series_set]
    out = list(series_set)
    if not out:
        raise TrainingError("no series given")
    return out


def fit_normalization(series_list: Sequence[CongestionSeries], days: Sequence[int]) -> NormalizationParams:
    """Min-Max bounds from the given (training) days only."""
    days = list(days)
    return NormalizationParams.fit(np.concatenate([s.values[days].ravel() for s in series_list]))


def stacked_instances(series_list, folding: FoldingConfig, days, norm: NormalizationParams):
    """Instances of all segments: (matrices, targets, (slot, day, segment) sort keys)."""
    mats, targets, keys = [], [], []
    for s in series_list:
        inst = build_instances(s, folding, days, values=normalize(s.values, norm))
        mats.append(inst.matrices)
        targets.append(inst.targets)
        keys.append(np.stack([inst.slots, inst.days, np.full(len(inst), _segment_rank(s.segment_id, series_list))]))
    return np.concatenate(mats), np.concatenate(targets), np.concatenate(keys, axis=1)


def _segment_rank(segment_id, series_list) -> int:
    return sorted(s.segment_id for s in series_list).index(segment_id)


def train(series_set, config: PcnnConfig = PcnnConfig()):
    """Train one network on one series, or one pooled network on several.

    Day 0 only provides history, so training targets are days 1..train_days-1.
    Validation metrics are computed on denormalised predictions after every
    epoch. Returns (TrainedPcnn, TrainReport).
    """
    started = time.perf_counter()
    series_list = _as_list(series_set)
    n_days = series_list[0].n_days
    if any(s.n_days != n_days for s in series_list):
        raise TrainingError("pooled series must share the calendar")
    split = split_days(n_days, config)
    norm = fit_normalization(series_list, split.train)
    x, y, keys = stacked_instances(series_list, config.folding, split.train, norm)
    if y.size == 0:
        raise TrainingError("no training instances")

    rng = np.random.default_rng(config.seed)
    model = build_model(config, rng)
    trained = TrainedPcnn(model, config, norm, tuple(s.segment_id for s in series_list))

    val_mae, val_rmse, val_mre = [], [], []
    n_val = 0

    def validate(epoch, _model):
        nonlocal n_val
        if not len(split.val):
            val_mae.append(None), val_rmse.append(None), val_mre.append(None)
            return
        pred, obs = [], []
        for s in series_list:
            _, _, p, o, _ = trained.predict_days(s, split.val)
            pred.append(p)
            obs.append(o)
        pred, obs = np.concatenate(pred), np.concatenate(obs)
        n_val = obs.size
        m = error_metrics(pred, obs)
        val_mae.append(m.mae), val_rmse.append(m.rmse), val_mre.append(m.mre)

    losses = fit_network(model, x, y, OptimConfig.from_pcnn(config), rng, validate, keys)
    report = TrainReport(losses, val_mae, val_rmse, val_mre, int(y.size), n_val, config.epochs,
                         time.perf_counter() - started)
    return trained, report


def train_per_segment(series_list: Sequence[CongestionSeries], config: PcnnConfig = PcnnConfig()):
    """One independently trained network per segment: {segment_id: (TrainedPcnn, TrainReport)}."""
    return {s.segment_id: train(s, config) for s in series_list}


def write_train_report(path, report: TrainReport) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
