"""Comparison forecasters: historical average, linear regression, K-NN, MLP and (seasonal) ARIMA.

HA, LR and MLP take either the 1-D recent+same-slot vector or the flattened
folded matrix as input. K-NN uses the 1-D vector. ARIMA works on the
chronological slot series of one segment.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .model import OptimConfig, build_mlp, fit_network

log = logging.getLogger(__name__)

INPUT_MODES = ("vector1d", "matrix2d")
KINDS = ("HA", "LR", "KNN", "MLP", "ARIMA")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    input_mode: str = "vector1d"
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.kind == "KNN" and self.input_mode != "vector1d":
            raise ValueError("K-NN matches 1-D patterns only")
        if self.kind == "KNN" and int(self.hyperparams.get("k", 15)) < 1:
            raise ValueError("K must be >= 1")
        if self.kind == "MLP" and any(int(h) < 1 for h in self.hyperparams.get("hidden", (1,))):
            raise ValueError("MLP layer sizes must be positive")


# ---------------------------------------------------------------- historical average

def ha_predict(inputs) -> np.ndarray:
    """Mean of each input row (a single row gives a scalar)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("historical average of an empty input")
    out = x.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- linear regression

@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    ridge_used: bool = False

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.coef + self.intercept


def lr_fit(x, y, ridge: float = 1e-6) -> LinearModel:
    """Least squares with an intercept; falls back to a small ridge penalty when rank deficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValueError("x must be (n, features) matching y")
    if x.shape[0] < 2:
        raise ValueError("linear regression needs at least two instances")
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    if np.linalg.matrix_rank(design) == design.shape[1]:
        beta = np.linalg.lstsq(design, y, rcond=None)[0]
        return LinearModel(beta[:-1], float(beta[-1]))
    log.info("design matrix rank deficient; using ridge %g", ridge)
    # centre so the intercept stays unpenalised
    mx, my = x.mean(axis=0), y.mean()
    xc = x - mx
    coef = np.linalg.solve(xc.T @ xc + ridge * np.eye(x.shape[1]), xc.T @ (y - my))
    return LinearModel(coef, float(my - mx @ coef), ridge_used=True)


def lr_predict(model: LinearModel, x):
    return model.predict(x)


# ---------------------------------------------------------------- K nearest neighbours

def recency_weights(t: int, d: int, gamma: float = 0.9) -> np.ndarray:
    """Feature weights for <c[n-t..n-1], c[m-1..m-d at the target slot]>.

    The recent slot at lag k gets gamma**(k-1); the value from k days back gets
    gamma**(k-1) as well, so the latest slot and the latest day count most.
    """
    recent = gamma ** np.arange(t)[::-1]
    days = gamma ** np.arange(d)
    return np.concatenate([recent, days])


@dataclass
class KnnModel:
    patterns: np.ndarray
    targets: np.ndarray
    k: int = 15
    feature_weights: Optional[np.ndarray] = None
    weighting: str = "distance"  # or "uniform"

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.targets.size == 0:
            raise ValueError("K-NN needs a non-empty training set")
        if self.k < 1 or self.k > self.targets.size:
            raise ValueError(f"K={self.k} outside 1..{self.targets.size}")
        if self.weighting not in ("distance", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.feature_weights is None:
            self.feature_weights = np.ones(self.patterns.shape[1])

    def distances(self, queries) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        w = np.sqrt(self.feature_weights)
        diff = q[:, None, :] * w - self.patterns[None, :, :] * w
        return np.sqrt(np.einsum("qnf,qnf->qn", diff, diff))

    def predict(self, queries, chunk: int = 256) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        out = np.empty(q.shape[0])
        for s in range(0, q.shape[0], chunk):
            dist = self.distances(q[s:s + chunk])
            # stable sort: equal distances keep training order
            nn = np.argsort(dist, axis=1, kind="stable")[:, :self.k]
            d_nn = np.take_along_axis(dist, nn, axis=1)
            if self.weighting == "distance":
                w = 1.0 / (d_nn + 1e-8)
            else:
                w = np.ones_like(d_nn)
            out[s:s + chunk] = np.sum(w * self.targets[nn], axis=1) / np.sum(w, axis=1)
        return out


def knn_predict(query, patterns, targets, k: int = 15, weights: str = "distance", feature_weights=None):
    model = KnnModel(patterns, targets, k, feature_weights, weights)
    out = model.predict(query)
    return float(out[0]) if np.ndim(query) == 1 else out


# ---------------------------------------------------------------- MLP

MLP1_HIDDEN = (200,) * 5
MLP2_HIDDEN = (150,) * 8


@dataclass
class MlpModel:
    network: object

    def predict(self, x, batch: int = 4096) -> np.ndarray:
        x = np.asarray(x)
        return np.concatenate([self.network.predict(x[s:s + batch]) for s in range(0, x.shape[0], batch)])


def mlp_fit(x, y, hidden: Sequence[int], optim: OptimConfig = OptimConfig(), seed: int = 0,
            dtype=np.float64) -> MlpModel:
    """ReLU MLP with identity output trained like the CNN (batch-mean loss, L2, RMSprop)."""
    x = np.asarray(x, dtype=dtype)
    rng = np.random.default_rng(seed)
    net = build_mlp(x.shape[1], hidden, rng, dtype)
    fit_network(net, x, np.asarray(y), optim, rng)
    return MlpModel(net)


def mlp_predict(model: MlpModel, x):
    return model.predict(x)


# ---------------------------------------------------------------- ARIMA

@dataclass(frozen=True, eq=False)
class Differenced:
    """A differenced series kept as exact (hi, lo) component pairs.

    `values` is the working series (the rounded sum of the components);
    `heads` hold the first `lag` values removed at each level, which together
    with the components give back the original series bit for bit.
    """

    values: np.ndarray
    parts: tuple
    heads: tuple
    lag: int


def _two_diff(a, b):
    """hi = fl(a - b) and lo such that hi + lo == a - b exactly."""
    hi = a - b
    bv = hi - a
    lo = (a - (hi - bv)) + (-b - bv)
    return hi, lo


def difference(x, order: int = 1, lag: int = 1) -> Differenced:
    x = np.asarray(x, dtype=np.float64)
    if order < 0 or lag < 1:
        raise ValueError("order must be >= 0 and lag >= 1")
    parts = [x]
    heads = []
    for _ in range(order):
        if parts[0].size <= lag:
            raise ValueError("series too short to difference")
        heads.append(tuple(p[:lag].copy() for p in parts))
        nxt = []
        for p in parts:
            nxt.extend(_two_diff(p[lag:], p[:-lag]))
        parts = nxt
    values = np.sum(parts, axis=0) if len(parts) > 1 else parts[0].copy()
    return Differenced(values, tuple(parts), tuple(heads), lag)


def integrate(diff: Differenced) -> np.ndarray:
    """Exact inverse of `difference`."""
    parts = list(diff.parts)
    lag = diff.lag
    for heads in reversed(diff.heads):
        prev = []
        for k, head in enumerate(heads):
            hi, lo = parts[2 * k], parts[2 * k + 1]
            out = np.empty(hi.size + lag)
            out[:lag] = head
            for i in range(hi.size):
                out[i + lag] = math.fsum((out[i], hi[i], lo[i]))
            prev.append(out)
        parts = prev
    return parts[0].copy()


@dataclass
class ArimaModel:
    p: int
    d: int
    q: int
    intercept: float
    phi: np.ndarray
    theta: np.ndarray
    seasonal_lag: Optional[int] = None
    sigma2: float = float("nan")

    def ar_roots(self) -> np.ndarray:
        if self.p == 0:
            return np.empty(0)
        return np.roots(np.r_[-self.phi[::-1], 1.0])


def _lagmat(w, p):
    n = w.size
    return np.column_stack([w[p - i - 1:n - i - 1] for i in range(p)]) if p else np.empty((n - p, 0))


def _css_residuals(w, c, phi, theta):
    """Conditional residuals e_t = w_t - c - sum phi_i w_{t-i} - sum theta_j e_{t-j}, pre-sample zeros."""
    p, q = phi.size, theta.size
    n = w.size
    e = np.zeros(n)
    ar = np.full(n, c)
    if p:
        ar[p:] += _lagmat(w, p) @ phi
        ar[:p] = np.nan
    for t in range(p, n):
        ma = 0.0
        for j in range(1, min(q, t - p) + 1):
            ma += theta[j - 1] * e[t - j]
        e[t] = w[t] - ar[t] - ma
    return e


def _ols_ar(w, p):
    y = w[p:]
    design = np.column_stack([np.ones(y.size), _lagmat(w, p)])
    beta = np.linalg.lstsq(design, y, rcond=None)[0]
    return float(beta[0]), beta[1:]


def arima_fit(series, p: int = 3, d_diff: int = 1, q: int = 0, seasonal_lag: Optional[int] = None) -> ArimaModel:
    """AR(p) by least squares on the differenced series; MA(q) by conditional sum of squares.

    With `seasonal_lag` the series is first differenced once at that lag
    (a reduced seasonal ARIMA). Near-unit AR roots trigger a RuntimeWarning.
    """
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if min(p, d_diff, q) < 0:
        raise ValueError("orders must be non-negative")
    extra = seasonal_lag or 0
    if x.size <= p + d_diff + q + extra + 10:
        raise ValueError(f"series of length {x.size} too short for ARIMA({p},{d_diff},{q})")
    if seasonal_lag:
        x = difference(x, 1, seasonal_lag).values
    w = difference(x, d_diff).values if d_diff else x

    if q == 0:
        c, phi = _ols_ar(w, p)
        theta = np.empty(0)
    else:
        # Hannan-Rissanen start: long AR residuals, then OLS on lags of w and e
        m = min(max(p, q) + 10, max(1, w.size // 4))
        c0, phi0 = _ols_ar(w, m)
        e0 = np.zeros(w.size)
        e0[m:] = w[m:] - c0 - _lagmat(w, m) @ phi0
        start = m + max(p, q)
        y = w[start:]
        cols = [np.ones(y.size)] + [w[start - i:w.size - i] for i in range(1, p + 1)]
        cols += [e0[start - j:w.size - j] for j in range(1, q + 1)]
        beta = np.linalg.lstsq(np.column_stack(cols), y, rcond=None)[0]
        init = np.clip(beta, -0.98, 0.98)
        init[0] = beta[0]

        def resid(theta_all):
            return _css_residuals(w, theta_all[0], theta_all[1:1 + p], theta_all[1 + p:])[p:]

        bounds = (np.r_[-np.inf, -np.inf * np.ones(p), -0.999 * np.ones(q)],
                  np.r_[np.inf, np.inf * np.ones(p), 0.999 * np.ones(q)])
        sol = least_squares(resid, init, bounds=bounds, method="trf")
        c, phi, theta = float(sol.x[0]), sol.x[1:1 + p], sol.x[1 + p:]

    e = _css_residuals(w, c, phi, theta)[p:]
    model = ArimaModel(p, d_diff, q, c, np.asarray(phi, dtype=np.float64), np.asarray(theta, dtype=np.float64),
                       seasonal_lag, float(np.mean(e * e)) if e.size else float("nan"))
    roots = model.ar_roots()
    if roots.size and np.min(np.abs(roots)) < 1.01:
        warnings.warn(f"AR polynomial has a root near or inside the unit circle (|z| = {np.min(np.abs(roots)):.3f});"
                      " forecasts may explode", RuntimeWarning, stacklevel=2)
    return model


def _difference_operator(d: int, seasonal_lag: Optional[int]) -> np.ndarray:
    """Coefficients a_k of (1-B)^d (1-B^s) so that w_t = sum_k a_k x_{t-k}."""
    poly = np.array([1.0])
    for _ in range(d):
        poly = np.convolve(poly, [1.0, -1.0])
    if seasonal_lag:
        seas = np.zeros(seasonal_lag + 1)
        seas[0], seas[-1] = 1.0, -1.0
        poly = np.convolve(poly, seas)
    return poly


def arima_forecast_origins(model: ArimaModel, series, origins, u: int = 1) -> np.ndarray:
    """u-step forecasts of series[o + u - 1] using only series[:o], for each origin o.

    Differenced values and residuals are computed once over the whole series;
    both are causal, so the forecast from origin o never sees series[o:].
    """
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    origins = np.asarray(origins, dtype=np.int64)
    op = _difference_operator(model.d, model.seasonal_lag)
    r = op.size - 1  # values lost to differencing
    if origins.size and origins.min() < r + model.p + 1:
        raise ValueError("not enough history before the first origin")
    w = np.convolve(x, op)[r:x.size] if r else x.copy()  # w[k] is the differenced value at time k + r
    e = _css_residuals(w, model.intercept, model.phi, model.theta)
    out = np.empty(origins.size)
    for k, o in enumerate(origins):
        # differenced history up to time o-1 is w[:o - r]
        wh = list(w[:o - r])
        eh = list(e[:o - r])
        xh = list(x[max(0, o - r):o]) if r else []
        for step in range(u):
            ar = sum(model.phi[i] * wh[-1 - i] for i in range(model.p))
            ma = sum(model.theta[j] * eh[-1 - j] for j in range(model.q))
            w_next = model.intercept + ar + ma
            wh.append(w_next)
            eh.append(0.0)
            # invert the difference operator: x_t = w_t - sum_{k>=1} a_k x_{t-k}
            x_next = w_next - sum(op[i] * xh[-i] for i in range(1, r + 1)) if r else w_next
            if r:
                xh.append(x_next)
        out[k] = x_next
    return out


def arima_predict(model: ArimaModel, history, u: int = 1) -> float:
    """u-step forecast following the end of `history`."""
    h = np.asarray(history, dtype=np.float64).reshape(-1)
    return float(arima_forecast_origins(model, np.r_[h, 0.0], [h.size], u)[0])
