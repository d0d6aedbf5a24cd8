"""Diagonal-covariance Gaussian mixtures fitted to parameter samples by EM."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import FormatError, ShapeError
from .nn import NetSpec
from .sgld import SampleSet

VARIANCE_FLOOR = 1e-6
COLLAPSE_MASS = 1e-8
DEFAULT_GRID = (1, 2, 5, 10, 20, 40, 60)
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class MoGModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dim)
    variances: np.ndarray  # (K, dim)
    spec: NetSpec = None
    trace: list = field(default_factory=list)
    reinitialized: int = 0
    converged: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = len(self.weights)
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ShapeError(f"{k} weights, means {self.means.shape}, variances {self.variances.shape}")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixing weights sum to {self.weights.sum()}")
        if self.spec is not None and self.spec.n_params != self.dim:
            raise ShapeError(f"mixture dim {self.dim} != spec n_params {self.spec.n_params}")

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def sample_params(self, count, rng):
        return draw(self, count, rng)

    def save(self, stem):
        stem = Path(stem)
        bin_path = io.write_blocks(stem.with_suffix(".bin"), [self.weights, self.means.ravel(), self.variances.ravel()])
        io.write_json(stem.with_suffix(".json"), {
            "kind": "mog",
            "format": io.MAGIC.decode(),
            "n_components": self.n_components,
            "dim": self.dim,
            "spec": self.spec.to_dict() if self.spec else None,
            "trace": self.trace,
            "reinitialized": self.reinitialized,
            "converged": self.converged,
            "sha256": io.file_sha256(bin_path),
        })
        return bin_path

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        meta = io.read_json(stem.with_suffix(".json"))
        if meta.get("kind") != "mog":
            raise FormatError(f"{stem}: not a mixture model")
        w, mu, var = io.read_blocks(stem.with_suffix(".bin"))
        k, dim = meta["n_components"], meta["dim"]
        spec = NetSpec.from_dict(meta["spec"]) if meta["spec"] else None
        # weights were renormalized before saving; float32 rounding can shift the sum slightly
        w = w / w.sum()
        return cls(w, mu.reshape(k, dim), var.reshape(k, dim), spec, meta["trace"],
                   meta["reinitialized"], meta["converged"])


def parameter_count(model_or_components, dim=None):
    """``N_c * (2 dim + 1)``: a mean and a variance per coordinate plus one weight."""
    if isinstance(model_or_components, MoGModel):
        k, dim = model_or_components.n_components, model_or_components.dim
    else:
        k = int(model_or_components)
    return k * (2 * dim + 1)


def _as_matrix(samples):
    x = samples.samples if isinstance(samples, SampleSet) else samples
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _component_log_density(x, means, variances):
    """(n, K) matrix of log N(x_i; mu_k, diag var_k)."""
    inv = 1.0 / variances
    # expand ||x - mu||^2_inv as x^2.inv - 2 x.(mu inv) + mu^2.inv to stay at O(n K dim)
    quad = (x * x) @ inv.T - 2.0 * x @ (means * inv).T + (means * means * inv).sum(axis=1)
    log_det = np.log(variances).sum(axis=1)
    return -0.5 * (quad + log_det + x.shape[1] * LOG_2PI)


def _log_joint(model, x):
    return _component_log_density(x, model.means, model.variances) + np.log(model.weights)


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def log_likelihood(model, samples):
    """Sum over rows of log sum_k pi_k N(x; mu_k, var_k)."""
    x = _as_matrix(samples)
    if x.shape[1] != model.dim:
        raise ShapeError(f"samples have {x.shape[1]} coordinates, model has {model.dim}")
    return float(_logsumexp(_log_joint(model, x)).sum())


def responsibilities(model, samples):
    x = _as_matrix(samples)
    lj = _log_joint(model, x)
    return np.exp(lj - _logsumexp(lj)[:, None])


def em_fit(samples, n_components, max_iters=500, tol=1e-4, rng=None, floor=VARIANCE_FLOOR, spec=None):
    """Fit a diagonal mixture by EM.

    Means start at ``n_components`` distinct random rows, variances at the
    global per-coordinate variance, weights uniform. Stops when the relative
    log-likelihood gain drops below ``tol``. A component whose responsibility
    mass falls under 1e-8 is re-seeded from a random row; ``reinitialized``
    counts those events. ``trace`` holds the log-likelihood before each M step.
    """
    x = _as_matrix(samples)
    if spec is None and isinstance(samples, SampleSet):
        spec = samples.spec
    n, dim = x.shape
    if n_components < 1 or n < n_components:
        raise ValueError(f"need at least {n_components} samples, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    global_var = np.maximum(x.var(axis=0), floor)
    means = x[rng.choice(n, n_components, replace=False)].copy()
    variances = np.tile(global_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    trace, reinit, converged = [], 0, False
    for _ in range(max_iters):
        lj = _component_log_density(x, means, variances) + np.log(weights)
        norm = _logsumexp(lj)
        ll = float(norm.sum())
        if trace and abs(ll - trace[-1]) <= tol * abs(trace[-1]):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        resp = np.exp(lj - norm[:, None])
        mass = resp.sum(axis=0)
        dead = mass < COLLAPSE_MASS
        for k in np.flatnonzero(dead):
            means[k] = x[rng.integers(n)]
            variances[k] = global_var
            reinit += 1
        live = ~dead
        r = resp[:, live]
        m = mass[live]
        means[live] = (r.T @ x) / m[:, None]
        # centered second moments; the E[x^2] - mu^2 shortcut cancels badly near the floor
        for j, k in enumerate(np.flatnonzero(live)):
            d = x - means[k]
            variances[k] = np.maximum(r[:, j] @ (d * d) / m[j], floor)
        mass = np.where(dead, COLLAPSE_MASS, mass)
        weights = mass / mass.sum()

    return MoGModel(weights, means, variances, spec, trace, reinit, converged)


def draw(model, count, rng):
    """Ancestral draws: a component by weight, then its diagonal Gaussian."""
    comp = rng.choice(model.n_components, size=count, p=model.weights)
    noise = rng.standard_normal((count, model.dim))
    return model.means[comp] + np.sqrt(model.variances[comp]) * noise


def mog_sample(model, count, rng):
    """:func:`draw` wrapped as a SampleSet over the model's network spec."""
    if model.spec is None:
        raise ValueError("model has no network spec; use draw() for raw vectors")
    return SampleSet(draw(model, count, rng), model.spec, {"source": "mog", "n_components": model.n_components})
