"""Comparison harness: every method sees the same splits and instances, scored by the same metrics.

Methods work on Min-Max scaled values fitted on the fitting days; predictions
are scaled back and clamped at zero before scoring.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import (
    MLP1_HIDDEN,
    MLP2_HIDDEN,
    KnnModel,
    arima_fit,
    arima_forecast_origins,
    ha_predict,
    lr_fit,
    mlp_fit,
    recency_weights,
)
from .domain import CongestionSeries, NormalizationParams, coarsen_series, denormalize, normalize
from .evaluation import ForecastReport, compute_metrics
from .folding import FoldingConfig, build_instances
from .model import OptimConfig, PcnnConfig, TrainedPcnn, build_model, fit_network, fit_normalization, train

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ForecastTask:
    """Scaled series plus the fitting/test day ranges shared by all methods."""

    series: List[CongestionSeries]
    folding: FoldingConfig
    norm: NormalizationParams
    fit_days: range
    test_days: range
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_series(cls, series_list, folding: FoldingConfig, fit_days: range, test_days: range) -> "ForecastTask":
        series_list = list(series_list)
        return cls(series_list, folding, fit_normalization(series_list, fit_days), fit_days, test_days)

    def scaled(self, s: CongestionSeries) -> np.ndarray:
        return normalize(s.values, self.norm)

    def instances(self, days):
        key = tuple(days)
        if key not in self._cache:
            self._cache[key] = [build_instances(s, self.folding, key, values=self.scaled(s)) for s in self.series]
        return self._cache[key]

    def inputs(self, mode: str, days) -> np.ndarray:
        sets = self.instances(days)
        if mode == "vector1d":
            return np.concatenate([i.vectors for i in sets])
        if mode == "matrix2d":
            return np.concatenate([i.flat_matrices() for i in sets])
        if mode == "matrix":
            return np.concatenate([i.matrices for i in sets])
        raise ValueError(f"unknown input mode {mode!r}")

    def targets(self, days) -> np.ndarray:
        return np.concatenate([i.targets for i in self.instances(days)])

    def report(self, days, scaled_predictions) -> ForecastReport:
        parts = []
        offset = 0
        for s, inst in zip(self.series, self.instances(days)):
            k = len(inst)
            pred = np.maximum(denormalize(scaled_predictions[offset:offset + k], self.norm), 0.0)
            obs = s.values[inst.days, inst.target_slots]
            parts.append(ForecastReport.from_predictions(s.segment_id, inst.days, inst.target_slots, pred, obs,
                                                         s.start_hour, s.slot_minutes))
            offset += k
        return ForecastReport.concat(parts)


class Method:
    name = "method"

    def fit(self, task: ForecastTask):
        return self

    def predict(self, task: ForecastTask, days) -> np.ndarray:
        raise NotImplementedError


class HAMethod(Method):
    def __init__(self, mode="vector1d"):
        self.mode = mode
        self.name = "HA(1)" if mode == "vector1d" else "HA(2)"

    def predict(self, task, days):
        return ha_predict(task.inputs(self.mode, days))


class LRMethod(Method):
    def __init__(self, mode="vector1d"):
        self.mode = mode
        self.name = "LR(1)" if mode == "vector1d" else "LR(2)"

    def fit(self, task):
        self.model = lr_fit(task.inputs(self.mode, task.fit_days), task.targets(task.fit_days))
        return self

    def predict(self, task, days):
        return self.model.predict(task.inputs(self.mode, days))


class KNNMethod(Method):
    """K-NN on the 1-D vector; with `k_grid`, K is picked by MAE on the last `val_days` fitting days."""

    name = "KNN"

    def __init__(self, k=15, gamma=0.9, weighting="distance", k_grid=None, val_days=5):
        self.k, self.gamma, self.weighting = k, gamma, weighting
        self.k_grid, self.val_days = k_grid, val_days

    def fit(self, task):
        w = recency_weights(task.folding.t, task.folding.d, self.gamma)
        if self.k_grid:
            self.k = self.select_k(task, w)
        self.model = KnnModel(task.inputs("vector1d", task.fit_days), task.targets(task.fit_days), self.k, w,
                              self.weighting)
        return self

    def select_k(self, task, w):
        days = list(task.fit_days)
        inner, val = days[:-self.val_days], days[-self.val_days:]
        if not inner:
            raise ValueError("too few fitting days to hold out a validation block")
        x, y = task.inputs("vector1d", inner), task.targets(inner)
        xv, yv = task.inputs("vector1d", val), task.targets(val)
        scores = {}
        for k in sorted(set(self.k_grid)):
            if k <= y.size:
                scores[k] = float(np.mean(np.abs(KnnModel(x, y, k, w, self.weighting).predict(xv) - yv)))
        if not scores:
            raise ValueError("no K in the grid fits the training set")
        best = min(scores, key=lambda k: (scores[k], k))
        log.info("K-NN validation MAE by K: %s; chose K=%d", scores, best)
        return best

    def predict(self, task, days):
        return self.model.predict(task.inputs("vector1d", days))


class MLPMethod(Method):
    def __init__(self, mode="vector1d", hidden=None, optim=OptimConfig(), seed=0, precision="f64"):
        self.mode = mode
        self.hidden = hidden if hidden is not None else (MLP1_HIDDEN if mode == "vector1d" else MLP2_HIDDEN)
        self.optim, self.seed = optim, seed
        self.dtype = np.float32 if precision == "f32" else np.float64
        self.name = "MLP(1)" if mode == "vector1d" else "MLP(2)"

    def fit(self, task):
        self.model = mlp_fit(task.inputs(self.mode, task.fit_days), task.targets(task.fit_days), self.hidden,
                             self.optim, self.seed, self.dtype)
        return self

    def predict(self, task, days):
        return self.model.predict(task.inputs(self.mode, days).astype(self.dtype)).astype(np.float64)


class ArimaMethod(Method):
    """One ARIMA per segment on its chronological slot sequence (days stitched end to end)."""

    def __init__(self, p=3, d=1, q=0, seasonal=False):
        self.p, self.d, self.q, self.seasonal = p, d, q, seasonal
        self.name = "SARIMA" if seasonal else "ARIMA"

    def fit(self, task):
        self.models = []
        last = max(task.fit_days) + 1
        for s in task.series:
            flat = task.scaled(s)[:last].reshape(-1)
            lag = s.slots_per_day if self.seasonal else None
            self.models.append(arima_fit(flat, self.p, self.d, self.q, lag))
        return self

    def predict(self, task, days):
        out = []
        u = task.folding.u
        for s, model, inst in zip(task.series, self.models, task.instances(days)):
            flat = task.scaled(s).reshape(-1)
            origins = inst.days * s.slots_per_day + inst.slots
            out.append(arima_forecast_origins(model, flat, origins, u))
        return np.concatenate(out)


class PcnnMethod(Method):
    name = "PCNN"

    def __init__(self, config: PcnnConfig = PcnnConfig()):
        self.config = config

    def fit(self, task):
        rng = np.random.default_rng(self.config.seed)
        self.model = build_model(self.config, rng)
        fit_network(self.model, task.inputs("matrix", task.fit_days), task.targets(task.fit_days),
                    OptimConfig.from_pcnn(self.config), rng)
        return self

    def predict(self, task, days):
        x = task.inputs("matrix", days)
        return np.concatenate([self.model.predict(x[s:s + 2048]) for s in range(0, x.shape[0], 2048)])


METHOD_NAMES = ("pcnn", "ha1", "ha2", "lr1", "lr2", "knn", "mlp1", "mlp2", "arima", "sarima")


def make_method(name: str, config: PcnnConfig = PcnnConfig(), knn_k: int = 15, arima_order=(3, 1, 0),
                knn_grid: Optional[Sequence[int]] = None) -> Method:
    """Method by short name; neural methods share the PCNN optimiser settings, seed and precision."""
    optim = OptimConfig.from_pcnn(config)
    key = name.lower()
    if key == "pcnn":
        return PcnnMethod(config)
    if key in ("ha1", "ha2"):
        return HAMethod("vector1d" if key == "ha1" else "matrix2d")
    if key in ("lr1", "lr2"):
        return LRMethod("vector1d" if key == "lr1" else "matrix2d")
    if key == "knn":
        return KNNMethod(knn_k, k_grid=knn_grid, val_days=config.val_days)
    if key in ("mlp1", "mlp2"):
        return MLPMethod("vector1d" if key == "mlp1" else "matrix2d", None, optim, config.seed, config.precision)
    if key in ("arima", "sarima"):
        return ArimaMethod(*arima_order, seasonal=key == "sarima")
    raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHOD_NAMES)}")


def at_granularity(series_list, slot_minutes: int):
    return [s if s.slot_minutes == slot_minutes else coarsen_series(s, slot_minutes) for s in series_list]


def evaluate_method(method: Method, task: ForecastTask):
    """Fit, predict the test days and score; returns (MetricsSummary, ForecastReport)."""
    method.fit(task)
    pred = np.asarray(method.predict(task, task.test_days), dtype=np.float64)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError(f"{method.name} produced non-finite predictions")
    report = task.report(task.test_days, pred)
    return compute_metrics(report), report


def compare_methods(series_list: Sequence[CongestionSeries], methods: Sequence[str],
                    slot_sizes: Sequence[int] = (5,), config: PcnnConfig = PcnnConfig(),
                    knn_k: int = 15, arima_order=(3, 1, 0), knn_grid: Optional[Sequence[int]] = None) -> List[dict]:
    """Score every method at every slot size on identical splits.

    Methods are fitted on the training plus validation days and tested on the
    test days; a K-NN grid is searched on the last validation-sized block of
    the fitting days. A failing method yields a row with status "failed" and the
    error text; the others still run.
    """
    rows = []
    for minutes in slot_sizes:
        coarse = at_granularity(series_list, minutes)
        split_end = config.train_days + config.val_days
        if coarse[0].n_days < split_end + config.test_days:
            raise ValueError("series too short for the configured split")
        task = ForecastTask.from_series(coarse, config.folding, range(0, split_end),
                                        range(split_end, split_end + config.test_days))
        for name in methods:
            method = make_method(name, config, knn_k, arima_order, knn_grid)
            started = time.perf_counter()
            row = {"method": method.name, "slot_minutes": minutes, "seed": config.seed}
            try:
                summary, _ = evaluate_method(method, task)
                row.update(status="ok", mae=summary.mae, rmse=summary.rmse, mre=summary.mre, error=None)
            except Exception as exc:  # isolate failures per cell
                log.warning("%s at %d min failed: %s", method.name, minutes, exc)
                row.update(status="failed", mae=None, rmse=None, mre=None, error=f"{type(exc).__name__}: {exc}")
            row["seconds"] = time.perf_counter() - started
            rows.append(row)
    return rows


DEFAULT_SWEEP = {"d": (3, 6, 9, 12), "t": (3, 6, 9, 12)}


def sweep(series_list, base: PcnnConfig, grid: Dict[str, Sequence] = None):
    """Train one model per grid point; pick the lowest final validation MAE.

    Grid points whose convolution stack does not fit the input are skipped.
    Returns (rows, best_row).
    """
    grid = DEFAULT_SWEEP if grid is None else grid
    keys = sorted(grid)
    rows = []
    for values in np.array(np.meshgrid(*[list(grid[k]) for k in keys], indexing="ij")).reshape(len(keys), -1).T:
        point = {k: int(v) for k, v in zip(keys, values)}
        row = dict(point)
        try:
            config = base.replace(**point)
        except ValueError as exc:
            row.update(status="skipped", error=str(exc))
            rows.append(row)
            continue
        _, report = train(series_list, config)
        row.update(status="ok", val_mae=report.val_mae[-1], val_rmse=report.val_rmse[-1],
                   val_mre=report.val_mre[-1], final_loss=report.epoch_losses[-1] if report.epoch_losses else None)
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok" and r["val_mae"] is not None]
    best = min(ok, key=lambda r: r["val_mae"]) if ok else None
    return rows, best
