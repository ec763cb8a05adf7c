"""Minimal dense-tensor network: valid 2-D convolutions, fully connected layers, RMSprop, gradient checking.

The public layout is channel-major: a single sample is (channels, height,
width) and batches add a leading axis. Internally the model keeps
activations channels-last so that every convolution is one contiguous
im2col copy followed by a single matrix product. Convolutions are the usual
deep-learning cross-correlation with stride 1 and no padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")

DTYPES = {"f64": np.float64, "f32": np.float32}


class DimensionError(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0)


def _activate(pre, activation):
    return relu(pre) if activation == "relu" else pre


def _activation_grad(pre, upstream, activation):
    if activation == "relu":
        return upstream * (pre > 0)
    return upstream


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _im2col(x, kh, kw):
    """(B, H, W, C) -> (B, Ho, Wo, kh*kw*C), offsets major, channels minor."""
    ho, wo = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    return np.concatenate([x[:, a:a + ho, b:b + wo, :] for a in range(kh) for b in range(kw)], axis=-1)


class ConvLayer:
    """2-D valid convolution. `weights` is (out, in, kh, kw); `bias` one value per output channel."""

    kind = "conv"

    def __init__(self, weights, bias, activation: str = "relu"):
        weights = np.asarray(weights)
        bias = np.asarray(bias)
        if weights.ndim != 4:
            raise DimensionError("conv kernels must be (out, in, kh, kw)")
        if bias.shape != (weights.shape[0],):
            raise DimensionError("one bias per output channel required")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("non-finite conv parameters")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, rng, in_channels, out_channels, kernel=(2, 2), activation="relu", dtype=np.float64):
        kh, kw = kernel
        w = glorot_uniform(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, out_channels * kh * kw)
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype), activation)

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def kernel(self):
        return self.weights.shape[2:]

    def params(self):
        return [self.weights, self.bias]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.kernel
        if c != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} input channels, got {c}")
        if h < kh or w < kw:
            raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return (self.out_channels, h - kh + 1, w - kw + 1)

    def _wmat(self):
        return self.weights.transpose(2, 3, 1, 0).reshape(-1, self.out_channels)

    def forward(self, x):
        """Channels-last forward: x is (B, H, W, C). Returns (activation, cache)."""
        b, h, w, c = x.shape
        self.output_shape((c, h, w))
        cols = _im2col(x, *self.kernel)
        pre = (cols.reshape(-1, cols.shape[-1]) @ self._wmat()).reshape(cols.shape[:3] + (self.out_channels,))
        pre += self.bias
        return _activate(pre, self.activation), (x.shape, cols, pre)

    def backward(self, cache, upstream, need_input_grad=True):
        x_shape, cols, pre = cache
        if upstream.shape != pre.shape:
            raise DimensionError(f"upstream gradient {upstream.shape} != output {pre.shape}")
        kh, kw = self.kernel
        n_out = self.out_channels
        g = _activation_grad(pre, upstream, self.activation).reshape(-1, n_out)
        dwmat = cols.reshape(-1, cols.shape[-1]).T @ g
        dw = dwmat.reshape(kh, kw, self.in_channels, n_out).transpose(3, 2, 0, 1)
        db = g.sum(axis=0)
        dx = None
        if need_input_grad:
            _, ho, wo, _ = pre.shape
            dcols = (g @ self._wmat().T).reshape(pre.shape[:3] + (kh * kw, self.in_channels))
            dx = np.zeros(x_shape, dtype=pre.dtype)
            for k in range(kh * kw):
                a, b = divmod(k, kw)
                dx[:, a:a + ho, b:b + wo, :] += dcols[:, :, :, k, :]
        return dx, [dw, db]


class DenseLayer:
    """Affine map y = W x + b with optional ReLU; `weights` is (out, in)."""

    kind = "dense"

    def __init__(self, weights, bias, activation: str = "identity"):
        weights = np.asarray(weights)
        bias = np.asarray(bias)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise DimensionError("dense layer needs (out, in) weights and (out,) bias")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("non-finite dense parameters")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, rng, n_in, n_out, activation="identity", dtype=np.float64):
        w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        return cls(w.astype(dtype), np.zeros(n_out, dtype=dtype), activation)

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    def params(self):
        return [self.weights, self.bias]

    def output_shape(self, in_shape):
        size = int(np.prod(in_shape))
        if size != self.n_in:
            raise DimensionError(f"dense layer expects {self.n_in} inputs, got {size}")
        return (self.n_out,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"dense layer expects (B, {self.n_in}) input, got {x.shape}")
        pre = x @ self.weights.T + self.bias
        return _activate(pre, self.activation), (x, pre)

    def backward(self, cache, upstream, need_input_grad=True):
        x, pre = cache
        if upstream.shape != pre.shape:
            raise DimensionError(f"upstream gradient {upstream.shape} != output {pre.shape}")
        g = _activation_grad(pre, upstream, self.activation)
        dw = g.T @ x
        db = g.sum(axis=0)
        dx = g @ self.weights if need_input_grad else None
        return dx, [dw, db]


def _to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x):
    return x.transpose(0, 3, 1, 2)


def _as_batch(x, ndim):
    x = np.asarray(x)
    single = x.ndim == ndim - 1
    return (x[None] if single else x), single


def conv_forward(x, layer: ConvLayer):
    """Forward a (C, H, W) tensor or a (B, C, H, W) batch."""
    xb, single = _as_batch(x, 4)
    out, _ = layer.forward(_to_nhwc(xb))
    out = _to_nchw(out)
    return out[0] if single else out


def conv_backward(x, layer: ConvLayer, upstream):
    """Returns (input_grad, weight_grad, bias_grad) of the conv map at `x`."""
    xb, single = _as_batch(x, 4)
    ub = np.asarray(upstream)[None] if single else np.asarray(upstream)
    _, cache = layer.forward(_to_nhwc(xb))
    dx, (dw, db) = layer.backward(cache, _to_nhwc(ub))
    dx = _to_nchw(dx)
    return (dx[0] if single else dx), dw, db


def dense_forward(x, layer: DenseLayer):
    xb, single = _as_batch(x, 2)
    out, _ = layer.forward(xb)
    return out[0] if single else out


def dense_backward(x, layer: DenseLayer, upstream):
    xb, single = _as_batch(x, 2)
    ub = np.atleast_2d(upstream) if single else np.asarray(upstream)
    _, cache = layer.forward(xb)
    dx, (dw, db) = layer.backward(cache, ub)
    return (dx[0] if single else dx), dw, db


class ConvNetModel:
    """Conv layers, an implicit channel-major flatten, then dense layers ending in one output."""

    def __init__(self, layers: Sequence, input_shape):
        self.layers = list(layers)
        if not self.layers:
            raise DimensionError("empty layer stack")
        input_shape = tuple(int(s) for s in input_shape)
        self.has_conv = self.layers[0].kind == "conv"
        if self.has_conv and len(input_shape) == 2:
            input_shape = (1,) + input_shape
        self.input_shape = input_shape
        shape = input_shape if self.has_conv else (int(np.prod(input_shape)),)
        seen_dense = False
        self.shapes = [shape]
        for layer in self.layers:
            if layer.kind == "conv" and seen_dense:
                raise DimensionError("conv layers must precede dense layers")
            seen_dense = seen_dense or layer.kind == "dense"
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if shape != (1,):
            raise DimensionError(f"model must end in a single output, got {shape}")

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def params(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def param_names(self) -> List[str]:
        names = []
        counts = {"conv": 0, "dense": 0}
        for layer in self.layers:
            counts[layer.kind] += 1
            names += [f"{layer.kind}{counts[layer.kind]}.weight", f"{layer.kind}{counts[layer.kind]}.bias"]
        return names

    def regularized_mask(self) -> List[bool]:
        """Weights are L2-penalised, biases are not."""
        return [True, False] * len(self.layers)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def weight_sq_norm(self) -> float:
        return float(sum(np.sum(l.weights.astype(np.float64) ** 2) for l in self.layers))

    def astype(self, dtype) -> "ConvNetModel":
        layers = [type(l)(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers]
        return ConvNetModel(layers, self.input_shape)

    def copy(self) -> "ConvNetModel":
        return self.astype(self.dtype)

    def prepare_input(self, x) -> np.ndarray:
        """Channel-major batch (or (B, H, W) for one channel) -> internal layout."""
        x = np.asarray(x, dtype=self.dtype)
        if self.has_conv:
            if x.ndim == 3 and self.input_shape[0] == 1:
                x = x[:, None]
            if x.shape[1:] != self.input_shape:
                raise DimensionError(f"expected input {self.input_shape}, got {x.shape[1:]}")
            return _to_nhwc(x)
        return x.reshape(x.shape[0], -1)

    def _layer_input(self, a, i):
        if self.layers[i].kind == "dense" and a.ndim == 4:
            return _to_nchw(a).reshape(a.shape[0], -1)
        return a

    def _forward_prepared(self, a, keep_caches=False):
        caches = []
        for i, layer in enumerate(self.layers):
            a = self._layer_input(a, i)
            a, cache = layer.forward(a)
            if keep_caches:
                caches.append(cache)
        return a[:, 0], caches

    def forward(self, x, keep_caches=False):
        out, caches = self._forward_prepared(self.prepare_input(x), keep_caches)
        return (out, caches) if keep_caches else out

    def predict(self, x) -> np.ndarray:
        return self.forward(x)

    def backward(self, caches, dout) -> List[np.ndarray]:
        """Parameter gradients given d(loss)/d(output) per sample."""
        g = np.asarray(dout, dtype=self.dtype).reshape(-1, 1)
        grads: List[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dx, pgrads = layer.backward(caches[i], g, need_input_grad=i > 0)
            grads = pgrads + grads
            if i > 0:
                prev_out = caches[i - 1][-1]
                if prev_out.ndim == 4 and dx.ndim == 2:
                    b, h, w, c = prev_out.shape
                    dx = _to_nhwc(dx.reshape(b, c, h, w))
                g = dx
        return grads

    def loss_and_grads(self, x, y, l2_lambda=0.0, prepared=False):
        """Batch-mean half squared error + L2 penalty, and its gradient for every parameter."""
        a = x if prepared else self.prepare_input(x)
        pred, caches = self._forward_prepared(a, keep_caches=True)
        y = np.asarray(y, dtype=pred.dtype).reshape(-1)
        loss = l2_squared_loss(pred, y, self.weight_sq_norm(), l2_lambda)
        grads = self.backward(caches, (pred - y) / pred.shape[0])
        if l2_lambda:
            for g, p, reg in zip(grads, self.params(), self.regularized_mask()):
                if reg:
                    g += l2_lambda * p
        return loss, grads

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {
                    "type": l.kind,
                    "activation": l.activation,
                    "weights_shape": list(l.weights.shape),
                    "weights": [float(v) for v in l.weights.ravel()],
                    "bias": [float(v) for v in l.bias.ravel()],
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc, dtype=np.float64):
        layers = []
        for spec in doc["layers"]:
            w = np.array(spec["weights"], dtype=dtype).reshape(spec["weights_shape"])
            b = np.array(spec["bias"], dtype=dtype)
            kind = {"conv": ConvLayer, "dense": DenseLayer}[spec["type"]]
            layers.append(kind(w, b, spec["activation"]))
        return cls(layers, doc["input_shape"])


def l2_squared_loss(pred, target, weight_sq_norm, l2_lambda, reduction="mean") -> float:
    """Half squared error plus half-lambda times the squared weight norm.

    With reduction="mean" the data term is averaged over the batch; "sum"
    adds it up as in the full-dataset objective.
    """
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    data = 0.5 * float(np.sum(err * err))
    if reduction == "mean":
        data /= max(err.size, 1)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return data + 0.5 * l2_lambda * weight_sq_norm


@dataclass
class RmspropState:
    learning_rate: float = 0.005
    rho: float = 0.9
    epsilon: float = 1e-8
    mean_square: Optional[List[np.ndarray]] = None


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: RmspropState):
    """In-place update: E <- rho E + (1 - rho) g^2; theta <- theta - lr g / sqrt(E + eps)."""
    if state.mean_square is None:
        state.mean_square = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.mean_square):
        raise DimensionError("params, grads and optimizer state disagree in length")
    for p, g, e in zip(params, grads, state.mean_square):
        if p.shape != g.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        e *= state.rho
        e += (1 - state.rho) * g * g
        p -= state.learning_rate * g / np.sqrt(e + state.epsilon)
    return params


# ---------------------------------------------------------------- gradient checking


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    max_rel_error: float = 0.0
    per_param: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    n_checked: int = 0
    n_reduced_step: int = 0
    n_unresolved_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} over {self.n_checked} parameters "
                f"(tolerance {self.tolerance:g}, {len(self.failures)} above, "
                f"{self.n_reduced_step} re-evaluated with a smaller step)")


def numerical_gradient(loss_fn: Callable[[], float], params: Sequence[np.ndarray], h=1e-5):
    """Plain central differences, one parameter at a time. Slow; meant for small models."""
    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss_fn()
            flat[k] = old - h
            down = loss_fn()
            flat[k] = old
            g.reshape(-1)[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _delta_relu(base_pre, delta, flips, K, mirrored=False):
    """relu(base + delta) - relu(base), exact, in place on `delta`.

    Units that stay on keep their delta and units that stay off get zero, so
    only switching units ever see the rounded sum base + delta. `delta` has a
    leading block axis over `base_pre`'s shape. Perturbations that switch any
    unit are OR-ed into `flips` (K,); with `mirrored`, a unit that -delta
    would switch counts too.
    """
    d = delta.reshape((-1,) + base_pre.shape)
    on = base_pre > 0
    moved = base_pre + d
    changed = (moved > 0) != on
    if mirrored:
        changed |= ((base_pre - d) > 0) != on
    flips |= changed.reshape(K, -1).any(axis=1)
    d *= on
    if changed.any():
        # a switching unit: the exact difference of the two activations
        d[changed] = (np.maximum(moved, 0.0) - np.maximum(base_pre, 0.0))[changed]
    return delta


class _Tail:
    """Propagates activation differences from a given layer to the output for many perturbations at once.

    Working with differences, rather than two full forward passes that are
    then subtracted, keeps the rounding error proportional to the
    perturbation instead of to the activations. ReLU is applied exactly, so
    the result is the true difference of the two forward passes. Buffers are
    reused across calls and dense weights that follow a conv layer are
    permuted to the channels-last flattening.
    """

    def __init__(self, model: "ConvNetModel", caches):
        self.model = model
        self.wmats = []
        self.pres = [c[-1] for c in caches]
        for i, layer in enumerate(model.layers):
            if layer.kind == "conv":
                w = np.ascontiguousarray(layer._wmat())
            else:
                w = layer.weights
                if i > 0 and model.layers[i - 1].kind == "conv":
                    shp = caches[i - 1][-1].shape[1:]  # (h, w, c)
                    w = w.reshape(w.shape[0], shp[2], shp[0], shp[1]).transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
                w = np.ascontiguousarray(w.T)
            self.wmats.append(w)
        self._buffers = {}

    def _buffer(self, key, shape):
        buf = self._buffers.get(key)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self._buffers[key] = buf
        return buf

    def activate(self, delta_pre, i, flips, K, mirrored=False):
        if self.model.layers[i].activation == "relu":
            return _delta_relu(self.pres[i], delta_pre, flips, K, mirrored)
        return delta_pre

    def run(self, da, start, flips, K, mirrored=False):
        """Activation difference entering layer `start` -> output differences; (K*2*B, ...) leading axis."""
        layers = self.model.layers
        for i in range(start, len(layers)):
            layer = layers[i]
            n = da.shape[0]
            if layer.kind == "conv":
                kh, kw = layer.kernel
                ho, wo = da.shape[1] - kh + 1, da.shape[2] - kw + 1
                c = da.shape[3]
                cols = self._buffer(("cols", i), (n, ho, wo, kh * kw * c))
                for a_ in range(kh):
                    for b_ in range(kw):
                        o = (a_ * kw + b_) * c
                        cols[..., o:o + c] = da[:, a_:a_ + ho, b_:b_ + wo, :]
                dpre = self._buffer(("pre", i), (n, ho, wo, layer.out_channels))
                np.matmul(cols.reshape(-1, cols.shape[-1]), self.wmats[i], out=dpre.reshape(-1, dpre.shape[-1]))
            else:
                dpre = self._buffer(("pre", i), (n, self.wmats[i].shape[1]))
                np.matmul(da.reshape(n, -1), self.wmats[i], out=dpre)
            # biases cancel in a difference
            da = self.activate(dpre, i, flips, K, mirrored)
        return da[:, 0]


def _perturbed_deltas(model: ConvNetModel, caches, li: int, is_bias: bool, idx: np.ndarray, h: float,
                      tail: Optional[_Tail] = None, mirrored: bool = False):
    """Output changes when one parameter of layer `li` moves by +h and by -h.

    Returns ((K, S, B) output differences from the unperturbed output, (K,)
    flags marking perturbations that switched any ReLU). The pre-activation
    change of layer `li` is exactly h times the parameter's input, and every
    later layer is evaluated exactly in difference form.

    With `mirrored` only the +h side is propagated (S = 1). While no unit
    switches in either direction, every step of the -h side is the exact
    negation of the +h side, rounding included, so nothing is lost; a
    perturbation that would switch a unit either way is flagged.
    """
    if tail is None:
        tail = _Tail(model, caches)
    layer = model.layers[li]
    pre = caches[li][-1]
    B = pre.shape[0]
    K = idx.size

    if layer.kind == "conv":
        cols = caches[li][1]
        n_in = layer.in_channels
        if is_bias:
            chan = idx
            unit_delta = np.ones((K, B) + pre.shape[1:3])
        else:
            chan, ci, a, b = np.unravel_index(idx, layer.weights.shape)
            col_idx = (a * layer.kernel[1] + b) * n_in + ci
            unit_delta = cols[..., col_idx].transpose(3, 0, 1, 2)  # (K, B, ho, wo)
        base = pre[..., chan].transpose(3, 0, 1, 2)  # (K, B, ho, wo)
    else:
        x_in = caches[li][0]
        if is_bias:
            chan = idx
            unit_delta = np.ones((K, B))
        else:
            chan, ci = np.unravel_index(idx, layer.weights.shape)
            unit_delta = x_in[:, ci].T  # (K, B)
        base = pre[:, chan].T  # (K, B)

    signs = [h] if mirrored else [h, -h]
    S = len(signs)
    step = np.array(signs).reshape((1, S) + (1,) * (base.ndim - 1))
    d_pre = step * unit_delta[:, None]  # (K, 2, B, ...)
    flips = np.zeros(K, dtype=bool)
    if layer.activation == "relu":
        # each perturbation touches one channel, so compare against that channel's base per k
        on = base[:, None] > 0
        moved = base[:, None] + d_pre
        changed = (moved > 0) != on
        if mirrored:
            changed |= ((base[:, None] - d_pre) > 0) != on
        flips |= changed.reshape(K, -1).any(axis=1)
        d_act = d_pre * on
        if changed.any():
            d_act[changed] = (np.maximum(moved, 0.0) - np.maximum(base[:, None], 0.0))[changed]
    else:
        d_act = d_pre

    if li == len(model.layers) - 1:
        return d_act, flips

    nxt = model.layers[li + 1]
    pre_next = caches[li + 1][-1]
    if nxt.kind == "conv":
        kh, kw = nxt.kernel
        h2, w2 = pre_next.shape[1:3]
        shifted = np.stack([d_act[..., a:a + h2, b:b + w2] for a in range(kh) for b in range(kw)], axis=-1)
        w_sel = nxt.weights[:, chan].transpose(1, 2, 3, 0).reshape(K, kh * kw, -1)  # (K, kh*kw, O')
        delta_next = (shifted.reshape(K, -1, kh * kw) @ w_sel).reshape((K, S, B, h2, w2, -1))
    elif layer.kind == "conv":
        block = pre.shape[1] * pre.shape[2]
        cols_idx = chan[:, None] * block + np.arange(block)[None, :]
        w_sel = nxt.weights[:, cols_idx].transpose(1, 2, 0)  # (K, block, O')
        delta_next = (d_act.reshape(K, S * B, block) @ w_sel).reshape(K, S, B, -1)
    else:
        w_sel = nxt.weights[:, chan].T  # (K, O')
        delta_next = d_act[..., None] * w_sel[:, None, None, :]
    da = delta_next.reshape((K * S * B,) + pre_next.shape[1:])
    da = tail.activate(da, li + 1, flips, K, mirrored)
    if li + 1 == len(model.layers) - 1:
        return da[:, 0].reshape(K, S, B), flips
    out = tail.run(da, li + 2, flips, K, mirrored)
    return out.reshape(K, S, B), flips


def _central_differences(model, caches, base_out, y, li, is_bias, idx, h, l2_lambda, tail=None,
                         mirrored=False):
    deltas, flips = _perturbed_deltas(model, caches, li, is_bias, idx, h, tail, mirrored)
    # L(+h) - L(-h) for L = mean of (out - y)^2 / 2, written in the output differences
    up = deltas[:, 0]
    down = -up if mirrored else deltas[:, 1]
    resid = (base_out - y)[None, :]
    data = 0.5 * np.sum((up - down) * (up + down + 2.0 * resid), axis=1) / y.size
    fd = data / (2 * h)
    if not is_bias and l2_lambda:
        # the central difference of a quadratic is exact: ((p+h)^2 - (p-h)^2) / (4h) == p
        fd += l2_lambda * model.layers[li].weights.reshape(-1)[idx]
    return fd, flips


def gradient_check(model: ConvNetModel, x, y, l2_lambda=0.0, tolerance=1e-4, h=1e-5,
                   grad_fn: Optional[Callable] = None, chunk: int = 16,
                   min_step: float = 1e-9) -> GradCheckReport:
    """Compare analytic gradients with central differences for every parameter, in 64-bit.

    The loss is the batch-mean half squared error plus the L2 weight penalty.
    A difference quotient whose +/-h evaluations switch some ReLU on or off
    straddles a kink and says nothing about the derivative; such parameters
    are re-evaluated with the step divided by 10 until no unit switches (or
    `min_step` is reached). `grad_fn(model, x, y, l2_lambda)` overrides the
    analytic path.
    """
    model = model.astype(np.float64)
    xp = model.prepare_input(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if grad_fn is None:
        _, analytic = model.loss_and_grads(xp, y, l2_lambda, prepared=True)
    else:
        analytic = grad_fn(model, x, y, l2_lambda)
    base_out, caches = model._forward_prepared(xp, keep_caches=True)
    tail = _Tail(model, caches)
    report = GradCheckReport(tolerance=tolerance, step=h)
    names = model.param_names()
    for li, layer in enumerate(model.layers):
        for pi, (p, is_bias) in enumerate(((layer.weights, False), (layer.bias, True))):
            name = names[2 * li + pi]
            g_an = np.asarray(analytic[2 * li + pi], dtype=np.float64).reshape(-1)
            numeric = np.empty(p.size)
            for start in range(0, p.size, chunk):
                idx = np.arange(start, min(start + chunk, p.size))
                fd, flips = _central_differences(model, caches, base_out, y, li, is_bias, idx, h, l2_lambda, tail,
                                                 mirrored=True)
                numeric[idx] = fd
                step = h
                pending = idx[flips]
                if pending.size:
                    # a unit switches on one side at least: evaluate both sides in full
                    fd, flips = _central_differences(model, caches, base_out, y, li, is_bias, pending, h, l2_lambda,
                                                     tail)
                    numeric[pending] = fd
                    pending = pending[flips]
                if pending.size:
                    report.n_reduced_step += pending.size
                while pending.size and step / 10 >= min_step:
                    step /= 10
                    fd, flips = _central_differences(model, caches, base_out, y, li, is_bias, pending, step, l2_lambda,
                                                     tail)
                    numeric[pending] = fd
                    pending = pending[flips]
                report.n_unresolved_kinks += pending.size
            rel = relative_error(g_an, numeric)
            report.per_param[name] = float(rel.max()) if rel.size else 0.0
            report.n_checked += rel.size
            for k in np.flatnonzero(rel >= tolerance):
                report.failures.append((name, int(k), float(g_an[k]), float(numeric[k]), float(rel[k])))
    report.max_rel_error = max(report.per_param.values(), default=0.0)
    return report
