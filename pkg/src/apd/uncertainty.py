"""Monte-Carlo predictive distributions and the scores computed from them.

A predictive batch for one input is a ``T x C`` matrix whose rows are the
class probabilities under ``T`` parameter draws. Stacks for many inputs are
``(n, T, C)`` arrays; the ``*_stack`` helpers score every input at once.
Entropies are in nats. Argmax ties go to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

MEASURES = ("entropy", "bald", "vr", "model_variance", "max_prob")
SOURCES = ("sgld", "apd", "mc_dropout", "point", "mog")


@dataclass
class PredictiveBatch:
    probs: np.ndarray
    source: str = "sgld"

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if p.shape[0] < 1:
            raise ValueError("a predictive batch needs at least one row")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("rows must be probability vectors")
        self.probs = p

    @property
    def n_samples(self):
        return self.probs.shape[0]

    def to_csv_rows(self, input_id):
        return [[input_id, t, *row] for t, row in enumerate(self.probs)]


def _probs(batch):
    p = batch.probs if isinstance(batch, PredictiveBatch) else np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if p.shape[0] == 0:
        raise ValueError("empty predictive batch")
    return p


def predictive_mean(batch):
    return _probs(batch).mean(axis=0)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return float(-(p * logs).sum())


def bald(batch):
    """Mutual information between the label and the parameters."""
    p = _probs(batch)
    mi = entropy(p.mean(axis=0)) - np.mean([entropy(row) for row in p])
    return max(mi, 0.0)


def variation_ratio(batch):
    """Fraction of draws whose argmax is not the modal class."""
    p = _probs(batch)
    votes = np.bincount(p.argmax(axis=1), minlength=p.shape[1])
    return 1.0 - votes.max() / p.shape[0]


def model_variance(batch):
    """Mean squared norm minus squared norm of the mean (population form)."""
    p = _probs(batch)
    mean = p.mean(axis=0)
    return max(float((p * p).sum(axis=1).mean() - mean @ mean), 0.0)


# --------------------------------------------------------------------------
# vectorized scoring over (n, T, C)


def _xlogx(p):
    return p * np.log(np.where(p > 0, p, 1.0))


def entropy_stack(probs):
    return -_xlogx(probs.mean(axis=1)).sum(axis=-1)


def bald_stack(probs):
    h_mean = entropy_stack(probs)
    mean_h = -_xlogx(probs).sum(axis=-1).mean(axis=1)
    return np.maximum(h_mean - mean_h, 0.0)


def vr_stack(probs):
    n, t, c = probs.shape
    votes = np.zeros((n, c))
    np.add.at(votes, (np.repeat(np.arange(n), t), probs.argmax(axis=-1).ravel()), 1.0)
    return 1.0 - votes.max(axis=1) / t


def model_variance_stack(probs):
    mean = probs.mean(axis=1)
    out = (probs * probs).sum(axis=-1).mean(axis=1) - (mean * mean).sum(axis=-1)
    return np.maximum(out, 0.0)


def max_prob_stack(probs):
    """``1 - max_c p_mean(c)``: the usual confidence score for point estimates."""
    return 1.0 - probs.mean(axis=1).max(axis=-1)


_STACK = {
    "entropy": entropy_stack,
    "bald": bald_stack,
    "vr": vr_stack,
    "model_variance": model_variance_stack,
    "max_prob": max_prob_stack,
}


def score(probs, measure):
    """Per-input uncertainty for an ``(n, T, C)`` stack; higher = more uncertain."""
    try:
        fn = _STACK[measure]
    except KeyError:
        raise ValueError(f"unknown measure {measure!r}; choose from {MEASURES}") from None
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[1] < 1:
        raise ValueError(f"expected an (n, T, C) stack, got shape {probs.shape}")
    return fn(probs)


# --------------------------------------------------------------------------
# prediction from parameter sources


@dataclass
class DropoutSource:
    """A trained network whose posterior draws are fresh dropout masks."""

    spec: nn.NetSpec
    params: np.ndarray


def predict(spec, source, x, T, rng=None):
    """Stack of softmax outputs, shape ``(n_inputs, T, C)``.

    ``source`` may be a SampleSet (``T`` draws spread over the set in draw
    order), anything with ``sample_params(count, rng)`` (generator, mixture),
    a :class:`DropoutSource` (one shared mask per draw) or a bare parameter
    vector (``T`` must be 1).
    """
    x = np.asarray(x, dtype=np.float64)
    if T < 1:
        raise ValueError("T must be >= 1")
    out = np.empty((x.shape[0], T, spec.output_dim))
    if isinstance(source, DropoutSource):
        rng = rng if rng is not None else np.random.default_rng(0)
        for t in range(T):
            mask = nn.DropoutMask.draw(source.spec, rng)
            out[:, t] = nn.softmax(nn.forward(source.spec, source.params, x, mask))
        return out
    thetas = draw_params(source, T, rng)
    for t, theta in enumerate(thetas):
        out[:, t] = nn.softmax(nn.forward(spec, theta, x))
    return out


def draw_params(source, count, rng=None):
    from .sgld import SampleSet

    if isinstance(source, SampleSet):
        if count > len(source):
            raise ValueError(f"T={count} exceeds the {len(source)} stored samples")
        return source.subset(count).samples
    if hasattr(source, "sample_params"):
        return source.sample_params(count, rng if rng is not None else np.random.default_rng(0))
    arr = np.asarray(source, dtype=np.float64)
    if arr.ndim == 1:
        if count != 1:
            raise ValueError("a point estimate supports only T=1")
        return arr[None, :]
    if count > arr.shape[0]:
        raise ValueError(f"T={count} exceeds the {arr.shape[0]} available samples")
    return arr[:count]


def predict_batch(spec, source, x, T, rng=None, tag="sgld"):
    """Per-input :class:`PredictiveBatch` objects."""
    stack = predict(spec, source, x, T, rng)
    return [PredictiveBatch(p, tag) for p in stack]


def write_csv(path, batches):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        c = batches[0].probs.shape[1]
        w.writerow(["input_id", "sample_id", *[f"p_{i}" for i in range(c)]])
        for i, b in enumerate(batches):
            w.writerows(b.to_csv_rows(i))
