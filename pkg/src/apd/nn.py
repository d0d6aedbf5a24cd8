"""Fully-connected networks over flat parameter vectors.

Every network in the package (classifier, generator, critic) is an MLP whose
parameters live in a single 1-D float64 array. The layout is fixed:

    W_0 (in_0 x out_0, row-major), b_0 (out_0), W_1, b_1, ...

so ``h_{l+1} = act(h_l @ W_l + b_l)`` for hidden layers and the last layer is
affine. Gradients are derived by hand for this family, including the
second-order path needed by the gradient penalty of a WGAN-GP critic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, ShapeError

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class NetSpec:
    """Architecture of an MLP.

    ``activation`` is applied after every hidden layer; ``slope`` is only read
    for ``leaky_relu``. ``dropout_rate`` is the drop probability used when a
    :class:`DropoutMask` is drawn for this spec.
    """

    layer_sizes: tuple
    activation: str = "relu"
    slope: float = 0.2
    dropout_rate: float = 0.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"need >= 2 positive layer sizes, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    @property
    def hidden_sizes(self):
        return self.layer_sizes[1:-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def n_params(self):
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "slope": self.slope,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            activation=d.get("activation", "relu"),
            slope=float(d.get("slope", 0.2)),
            dropout_rate=float(d.get("dropout_rate", 0.0)),
        )


@dataclass
class DropoutMask:
    """Keep indicators for each hidden layer.

    Each entry of ``keep`` has shape ``(width,)`` (one network draw shared by
    all inputs) or ``(n, width)`` (per-example masks, used in training).
    Kept units are rescaled by ``1 / (1 - rate)``.
    """

    keep: list = field(default_factory=list)
    rate: float = 0.0

    @classmethod
    def draw(cls, spec, rng, n=None):
        keep_p = 1.0 - spec.dropout_rate
        keep = []
        for width in spec.hidden_sizes:
            shape = (width,) if n is None else (n, width)
            keep.append((rng.random(shape) < keep_p).astype(np.float64))
        return cls(keep=keep, rate=spec.dropout_rate)


# --------------------------------------------------------------------------
# parameter layout


def layer_shapes(spec):
    s = spec.layer_sizes
    return [(s[i], s[i + 1]) for i in range(len(s) - 1)]


def unflatten(spec, params):
    """Return ``[(W_0, b_0), ...]`` as views into ``params``."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ShapeError(
            f"parameter vector has shape {params.shape}, spec expects ({spec.n_params},)"
        )
    out = []
    offset = 0
    for fan_in, fan_out in layer_shapes(spec):
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def flatten(spec, layers):
    """Inverse of :func:`unflatten`."""
    shapes = layer_shapes(spec)
    if len(layers) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} layers, got {len(layers)}")
    chunks = []
    for (w, b), (fan_in, fan_out) in zip(layers, shapes):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ShapeError(
                f"layer expects W{(fan_in, fan_out)} b{(fan_out,)}, got W{w.shape} b{b.shape}"
            )
        chunks.append(w.ravel())
        chunks.append(b)
    return np.concatenate(chunks)


def fold_dropout(spec, params, mask):
    """Bake one shared dropout draw into the weights.

    Returns ``(spec_without_dropout, params)`` computing the same function as
    ``forward(spec, params, x, mask)``: each kept hidden unit scales the rows of
    the next weight matrix by ``1 / (1 - rate)``, dropped units zero them.
    """
    plain = replace(spec, dropout_rate=0.0)
    out = np.array(params, dtype=np.float64)
    layers = unflatten(plain, out)
    for i, keep in enumerate(mask.keep):
        keep = np.asarray(keep)
        if keep.ndim != 1:
            raise ShapeError("only a mask shared across inputs can be folded")
        layers[i + 1][0][...] *= (keep / (1.0 - mask.rate))[:, None]
    return plain, out


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in layer_shapes(spec):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return flatten(spec, layers)


# --------------------------------------------------------------------------
# activations


def _act(spec, z):
    a = spec.activation
    if a == "relu":
        return np.maximum(z, 0.0)
    if a == "leaky_relu":
        return np.where(z >= 0.0, z, spec.slope * z)
    if a == "tanh":
        return np.tanh(z)
    return z


def _act_grad(spec, z):
    # kinks resolve to the positive branch
    a = spec.activation
    if a == "relu":
        return (z >= 0.0).astype(np.float64)
    if a == "leaky_relu":
        return np.where(z >= 0.0, 1.0, spec.slope)
    if a == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _act_grad2(spec, z):
    if spec.activation == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    return None  # piecewise linear: zero almost everywhere


# --------------------------------------------------------------------------
# forward / backward


def _check_inputs(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs have shape {x.shape}, spec expects (n, {spec.input_dim})")
    return x


def _run(spec, layers, x, mask=None):
    """Forward pass keeping pre-activations ``zs`` and layer inputs ``acts``."""
    acts = [x]
    zs = []
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        zs.append(z)
        if i == last:
            break
        h = _act(spec, z)
        if mask is not None:
            keep = mask.keep[i]
            if keep.shape[-1] != z.shape[1]:
                raise ShapeError(
                    f"dropout mask for layer {i} has width {keep.shape[-1]}, expected {z.shape[1]}"
                )
            h = h * (keep * (1.0 / (1.0 - mask.rate)))
        acts.append(h)
    return zs, acts


def _backward(spec, layers, zs, acts, dout, mask=None, want_input=False):
    """Reverse pass given ``dL/d(output)``; returns (flat param grad, input grad)."""
    grad = np.empty(spec.n_params)
    views = unflatten(spec, grad)
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = views[i]
        np.matmul(acts[i].T, delta, out=gw)
        gb[:] = delta.sum(axis=0)
        if i == 0 and not want_input:
            break
        g_in = delta @ w.T
        if i == 0:
            return grad, g_in
        if mask is not None:
            g_in = g_in * (mask.keep[i - 1] * (1.0 / (1.0 - mask.rate)))
        delta = g_in * _act_grad(spec, zs[i - 1])
    return grad, None


def forward(spec, params, x, mask=None):
    """Logits of shape ``(n, output_dim)``."""
    x = _check_inputs(spec, x)
    zs, _ = _run(spec, unflatten(spec, params), x, mask)
    return zs[-1]


def log_softmax(logits):
    """Row-wise log-softmax with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("log_softmax received non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(spec, y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"labels have shape {y.shape}, expected ({n},)")
    if n and (y.min() < 0 or y.max() >= spec.output_dim):
        raise ShapeError(f"labels must lie in [0, {spec.output_dim})")
    return y.astype(np.intp)


def loss_and_grad(spec, params, x, y, prior_precision=0.0, scale=1.0, mask=None):
    """Scaled cross-entropy plus Gaussian prior, and its exact gradient.

    loss = scale * sum_i -log p(y_i | x_i) + prior_precision * ||params||^2 / 2

    With ``scale = N / n`` this is the minibatch estimate of the negative
    log-posterior (up to a constant).
    """
    x = _check_inputs(spec, x)
    y = _check_labels(spec, y, x.shape[0])
    params = np.asarray(params, dtype=np.float64)
    layers = unflatten(spec, params)
    zs, acts = _run(spec, layers, x, mask)
    logp = log_softmax(zs[-1])
    rows = np.arange(x.shape[0])
    nll = -logp[rows, y].sum()
    loss = scale * nll + 0.5 * prior_precision * float(params @ params)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    dout = np.exp(logp)
    dout[rows, y] -= 1.0
    dout *= scale
    grad, _ = _backward(spec, layers, zs, acts, dout, mask)
    if prior_precision:
        grad += prior_precision * params
    return loss, grad


def grad_input(spec, params, x, y, mask=None):
    """Gradient of each example's cross-entropy w.r.t. its own input."""
    x = _check_inputs(spec, x)
    y = _check_labels(spec, y, x.shape[0])
    layers = unflatten(spec, params)
    zs, acts = _run(spec, layers, x, mask)
    dout = softmax(zs[-1])
    dout[np.arange(x.shape[0]), y] -= 1.0
    _, gx = _backward(spec, layers, zs, acts, dout, mask, want_input=True)
    return gx


def backward(spec, params, x, dout):
    """Vector-Jacobian product of the network output: returns (param grad, input grad)."""
    x = _check_inputs(spec, x)
    layers = unflatten(spec, params)
    zs, acts = _run(spec, layers, x)
    return _backward(spec, layers, zs, acts, np.asarray(dout, dtype=np.float64), want_input=True)


# --------------------------------------------------------------------------
# scalar-output networks (critic)


def critic_input_grad(spec, params, x):
    """Rows of ``grad_x D(x)`` for a scalar-output network."""
    if spec.output_dim != 1:
        raise ShapeError("critic networks must have a single output")
    x = _check_inputs(spec, x)
    layers = unflatten(spec, params)
    zs, acts = _run(spec, layers, x)
    _, gx = _backward(spec, layers, zs, acts, np.ones((x.shape[0], 1)), want_input=True)
    return gx


def input_grad_penalty(spec, params, x_hat):
    """Per-row ``(||grad_x D(x_hat)||_2 - 1)^2``."""
    g = critic_input_grad(spec, params, x_hat)
    return (np.sqrt((g * g).sum(axis=1)) - 1.0) ** 2


def grad_param_of_input_grad_norm(spec, params, x_hat):
    """Mean penalty over rows of ``x_hat`` and its gradient w.r.t. ``params``.

    This differentiates the input-gradient (itself a backward pass) a second
    time, so the forward and backward passes are both replayed in adjoint
    form. Rows whose input-gradient norm is below 1e-12 contribute nothing.
    """
    if spec.output_dim != 1:
        raise ShapeError("critic networks must have a single output")
    x = _check_inputs(spec, x_hat)
    m = x.shape[0]
    layers = unflatten(spec, params)
    n_layers = len(layers)
    zs, acts = _run(spec, layers, x)

    # backward pass for the input gradient, keeping every delta and g
    deltas = [None] * n_layers
    gs = [None] * n_layers  # gs[l] = dD/d(acts[l])
    deltas[-1] = np.ones((m, 1))
    for l in range(n_layers - 1, -1, -1):
        gs[l] = deltas[l] @ layers[l][0].T
        if l > 0:
            deltas[l - 1] = gs[l] * _act_grad(spec, zs[l - 1])

    g0 = gs[0]
    norms = np.sqrt((g0 * g0).sum(axis=1))
    penalty = (norms - 1.0) ** 2
    ok = norms >= GRAD_NORM_FLOOR
    coef = np.zeros(m)
    coef[ok] = 2.0 * (norms[ok] - 1.0) / norms[ok] / m

    grad = np.zeros(spec.n_params)
    views = unflatten(spec, grad)
    second = _act_grad2(spec, zs[0]) is not None
    zbar = [None] * n_layers

    gbar = coef[:, None] * g0
    for l in range(n_layers):
        w = layers[l][0]
        # gs[l] = deltas[l] @ w.T
        views[l][0][...] += gbar.T @ deltas[l]
        if l == n_layers - 1:
            break
        dbar = gbar @ w
        # deltas[l] = gs[l+1] * act'(zs[l])
        gbar = dbar * _act_grad(spec, zs[l])
        if second:
            zbar[l] = dbar * gs[l + 1] * _act_grad2(spec, zs[l])

    if second:
        # replay the forward pass in adjoint form for the act'' terms
        carry = None
        for l in range(n_layers - 2, -1, -1):
            zb = zbar[l] if carry is None else zbar[l] + carry
            w, _ = layers[l]
            views[l][0][...] += acts[l].T @ zb
            views[l][1][...] += zb.sum(axis=0)
            if l > 0:
                carry = (zb @ w.T) * _act_grad(spec, zs[l - 1])

    return float(penalty.mean()), grad
