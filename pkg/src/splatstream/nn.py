"""Dense-network toolkit: MLP specs over flat parameter vectors.

Parameters for a network live in one flat float64 vector whose layout is
derived from the spec (weights then bias per layer), which makes
checkpointing, finite-difference checks, and parameter-distance measurements
trivial. Forward passes come in two flavours: a plain numpy path for
inference and a Tensor path for use inside larger differentiable graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class MlpSpec:
    """Widths (input first), one activation per layer, and an init seed."""

    widths: tuple
    activations: tuple
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activations must be in {ACTIVATIONS}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def layer_slices(self):
        """Yield (weight_slice, bias_slice, (w_out, w_in)) per layer."""
        offset = 0
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            w_n = w_in * w_out
            yield slice(offset, offset + w_n), slice(offset + w_n, offset + w_n + w_out), (w_out, w_in)
            offset += w_n + w_out

    def param_count(self):
        return sum((w_in + 1) * w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))


def mlp(widths, hidden_activation="relu", out_activation="none", seed=0):
    """Convenience constructor: ReLU hidden layers, linear output by default."""
    acts = tuple([hidden_activation] * (len(widths) - 2) + [out_activation])
    return MlpSpec(tuple(int(w) for w in widths), acts, seed)


def init_params(spec):
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, seeded."""
    rng = np.random.default_rng(spec.seed)
    params = np.zeros(spec.param_count(), dtype=np.float64)
    for w_sl, _b_sl, (w_out, w_in) in spec.layer_slices():
        bound = np.sqrt(6.0 / (w_in + w_out))
        params[w_sl] = rng.uniform(-bound, bound, w_in * w_out)
    return params


def mlp_forward(spec, params, x):
    """Plain numpy forward pass; accepts a vector or an (N, in) batch."""
    x = np.asarray(x, dtype=np.float64)
    if params.shape != (spec.param_count(),):
        raise ValueError(f"params length {params.shape} != layout {spec.param_count()}")
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {h.shape[1]} != spec width {spec.widths[0]}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite input to mlp_forward")
    for (w_sl, b_sl, shape), act in zip(spec.layer_slices(), spec.activations):
        w = params[w_sl].reshape(shape)
        h = h @ w.T + params[b_sl]
        if act == "relu":
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def mlp_forward_t(spec, params_t, x_t):
    """Tensor forward pass for composition inside autodiff graphs."""
    h = x_t
    single = h.value.ndim == 1
    if single:
        h = ad.reshape(h, (1, h.value.shape[0]))
    if h.value.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {h.value.shape[1]} != spec width {spec.widths[0]}")
    for (w_sl, b_sl, shape), act in zip(spec.layer_slices(), spec.activations):
        w = ad.reshape(ad.slice1d(params_t, w_sl.start, w_sl.stop), shape)
        b = ad.slice1d(params_t, b_sl.start, b_sl.stop)
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if act == "relu":
            h = ad.relu(h)
    if single:
        h = ad.reshape(h, (h.value.shape[1],))
    return h


def gradients(spec, params, x, upstream):
    """Reverse-mode gradient of sum(upstream * output) w.r.t. the flat params."""
    params_t = ad.Tensor(params, requires_grad=True)
    y = mlp_forward_t(spec, params_t, ad.Tensor(np.asarray(x, dtype=np.float64)))
    y.backward(seed=np.asarray(upstream, dtype=np.float64))
    return params_t.grad if params_t.grad is not None else np.zeros_like(params)


def softmax(scores):
    """Shift-invariant softmax of a score vector; entries positive, sum 1."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax requires finite scores")
    e = np.exp(scores - scores.max())
    return e / e.sum()


def smooth_l1(x):
    """Huber-style loss: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < 1.0, 0.5 * x * x, np.abs(x) - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.clip(x, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def film(h, beta, gamma):
    """Feature-wise linear modulation: beta * h + gamma, elementwise."""
    h = np.asarray(h, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if h.shape != beta.shape or h.shape != gamma.shape:
        raise ValueError("film requires equal-length operands")
    return beta * h + gamma


def finite_difference_check(spec, params, x, upstream, h=1e-5, rel_tol=1e-4, probes=None, rng=None):
    """Compare reverse-mode gradients against central differences.

    Probes a subset of coordinates (all when `probes` is None); returns the
    worst relative error seen.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    grad = gradients(spec, params, x, upstream)
    n = params.size
    if probes is None or probes >= n:
        idx = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(n, size=probes, replace=False)
    worst = 0.0
    for i in idx:
        p_hi, p_lo = params.copy(), params.copy()
        p_hi[i] += h
        p_lo[i] -= h
        f_hi = float(np.sum(mlp_forward(spec, p_hi, x) * upstream))
        f_lo = float(np.sum(mlp_forward(spec, p_lo, x) * upstream))
        fd = (f_hi - f_lo) / (2.0 * h)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]), abs(fd))
        worst = max(worst, err)
        if worst > rel_tol:
            break
    return worst


class MomentumSgd:
    """Gradient descent with momentum 0.9 (the default training optimizer)."""

    def __init__(self, lr, momentum=0.9):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {}

    def step(self, params, grad, key=0):
        v = self._velocity.get(key)
        if v is None:
            v = np.zeros_like(params)
        v = self.momentum * v - self.lr * grad
        self._velocity[key] = v
        return params + v


class Mlp:
    """Spec + flat params bundled, with a cached leaf Tensor for training."""

    def __init__(self, spec, params=None):
        self.spec = spec
        self.params = init_params(spec) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (spec.param_count(),):
            raise ValueError("params do not match spec layout")

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x)

    def forward_t(self, x_t):
        return mlp_forward_t(self.spec, self.leaf(), x_t)

    def leaf(self):
        if getattr(self, "_leaf", None) is None or self._leaf.value is not self.params:
            self._leaf = ad.Tensor(self.params, requires_grad=True)
        return self._leaf

    def refresh(self):
        """Drop the cached leaf after a parameter update."""
        self._leaf = None


def save_checkpoint(path, arrays, meta=None):
    """Write named float64 arrays (bit-exact) plus optional scalar metadata."""
    payload = {f"arr_{k}": np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    if meta:
        for k, v in meta.items():
            payload[f"meta_{k}"] = np.asarray(v)
    np.savez(path, **payload)


def load_checkpoint(path):
    data = np.load(path, allow_pickle=False)
    arrays = {k[4:]: data[k] for k in data.files if k.startswith("arr_")}
    meta = {k[5:]: data[k] for k in data.files if k.startswith("meta_")}
    return arrays, meta
