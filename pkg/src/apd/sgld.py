"""Stochastic-gradient Langevin dynamics (and plain SGD) over flat parameters.

Both modes share one update rule on the log-posterior,

    theta <- theta + (eps / 2) * (grad log p(theta) + (N / n) * sum_i grad log p(y_i | x_i, theta))

and SGLD adds ``N(0, eps)`` noise per coordinate. The step size is fixed;
burn-in and thinning are plain hyperparameters.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, nn
from .errors import DivergenceError, FormatError, ShapeError
from .nn import NetSpec

DIVERGENCE_LIMIT = 1e6


@dataclass
class SamplerConfig:
    step_size: float = None  # defaults to 0.05 / N once N is known
    burn_in: int = 500
    thin_interval: int = 20
    total_samples: int = 200
    batch_size: int = 100
    dataset_size: int = None  # defaults to the number of training rows
    prior_precision: float = 1.0
    seed: int = 0
    mode: str = "sgld"

    def __post_init__(self):
        if self.mode not in ("sgd", "sgld"):
            raise ValueError(f"mode must be 'sgd' or 'sgld', got {self.mode!r}")
        if self.thin_interval < 1:
            raise ValueError("thin_interval must be >= 1")
        if self.burn_in < 0 or self.total_samples < 1 or self.batch_size < 1:
            raise ValueError("burn_in >= 0, total_samples >= 1 and batch_size >= 1 required")
        if self.step_size is not None and not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError(f"step_size must be finite and positive, got {self.step_size}")

    def resolved(self, n_rows):
        """Copy with ``dataset_size`` and ``step_size`` filled in."""
        size = self.dataset_size or n_rows
        step = self.step_size if self.step_size is not None else 0.05 / size
        return dataclasses.replace(self, dataset_size=size, step_size=step)

    @property
    def n_iterations(self):
        return self.burn_in + self.total_samples * self.thin_interval

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SampleSet:
    """Posterior draws in draw order, one row per parameter vector."""

    samples: np.ndarray
    spec: NetSpec
    config: dict = field(default_factory=dict)
    chain_id: int = 0
    indices: np.ndarray = None
    diverged: DivergenceError = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[1] != self.spec.n_params:
            raise ShapeError(
                f"samples have {self.samples.shape[1]} columns, spec has {self.spec.n_params} params"
            )
        if self.indices is None:
            self.indices = np.arange(1, len(self.samples) + 1)
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return self.samples.shape[0]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, count):
        """``count`` draws spread evenly over the set, in draw order."""
        n = len(self)
        if count > n:
            raise ValueError(f"requested {count} samples from a set of {n}")
        if count == n:
            return self
        idx = np.floor(np.arange(count) * (n / count)).astype(np.int64)
        return dataclasses.replace(self, samples=self.samples[idx], indices=self.indices[idx])

    def save(self, stem):
        stem = Path(stem)
        bin_path = io.write_blocks(stem.with_suffix(".bin"), list(self.samples))
        meta = {
            "kind": "sample_set",
            "format": io.MAGIC.decode(),
            "spec": self.spec.to_dict(),
            "config": self.config,
            "chain_id": self.chain_id,
            "count": len(self),
            "indices": self.indices.tolist(),
            "sha256": io.file_sha256(bin_path),
        }
        io.write_json(stem.with_suffix(".json"), meta)
        return bin_path

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        meta = io.read_json(stem.with_suffix(".json"))
        if meta.get("kind") != "sample_set" or meta.get("format") != io.MAGIC.decode():
            raise FormatError(f"{stem}: not an {io.MAGIC.decode()} sample set")
        blocks = io.read_blocks(stem.with_suffix(".bin"))
        if len(blocks) != meta["count"]:
            raise FormatError(f"{stem}: sidecar says {meta['count']} samples, found {len(blocks)}")
        spec = NetSpec.from_dict(meta["spec"])
        samples = np.stack(blocks) if blocks else np.zeros((0, spec.n_params))
        return cls(samples, spec, meta["config"], meta["chain_id"], np.array(meta["indices"]))


def pool(sets):
    """Concatenate sample sets ordered by ``chain_id``."""
    sets = sorted(sets, key=lambda s: s.chain_id)
    if not sets:
        raise ValueError("nothing to pool")
    return SampleSet(
        np.concatenate([s.samples for s in sets]),
        sets[0].spec,
        sets[0].config,
        chain_id=-1,
        indices=np.concatenate([s.indices for s in sets]),
    )


# --------------------------------------------------------------------------
# updates


def langevin_update(params, grad_log_prior, grad_log_lik_sum, scale, step_size, noise=None):
    """Apply one SGD (``noise is None``) or SGLD step on the log-posterior."""
    delta = 0.5 * step_size * (grad_log_prior + scale * grad_log_lik_sum)
    out = params + delta
    if noise is not None:
        out = out + noise
    return out


def _check_finite(theta, iteration=None, **ctx):
    if not np.all(np.isfinite(theta)) or np.abs(theta).max() > DIVERGENCE_LIMIT:
        raise DivergenceError("parameters diverged", iteration=iteration, **ctx)


def sgd_step(spec, params, x, y, config, mask=None):
    """One minibatch ascent step on the log-posterior, without noise."""
    n = len(y)
    scale = config.dataset_size / n
    # loss_and_grad returns the gradient of -log posterior
    _, g = nn.loss_and_grad(spec, params, x, y, config.prior_precision, scale, mask)
    out = params - 0.5 * config.step_size * g
    _check_finite(out)
    return out


def sgld_step(spec, params, x, y, config, rng, mask=None):
    """:func:`sgd_step` plus ``N(0, step_size)`` noise per coordinate."""
    out = sgd_step(spec, params, x, y, config, mask)
    out = out + np.sqrt(config.step_size) * rng.standard_normal(out.shape[0])
    _check_finite(out)
    return out


def _minibatches(n_rows, batch_size, rng):
    while True:
        perm = rng.permutation(n_rows)
        for start in range(0, n_rows, batch_size):
            yield perm[start:start + batch_size]


class Chain:
    """A resumable fixed-step chain over any differentiable log-posterior.

    ``grad_neg_log_post(theta, idx, scale, rng)`` must return the minibatch
    estimate ``-grad log p(theta) - scale * sum_{i in idx} grad log p(y_i | theta)``.
    The iteration counter and minibatch stream persist across :meth:`run`
    calls, so a chain can be advanced in segments.
    """

    def __init__(self, grad_neg_log_post, init, n_rows, config, rng, chain_id=0):
        self.grad = grad_neg_log_post
        self.theta = np.array(init, dtype=np.float64)
        self.config = config
        self.rng = rng
        self.chain_id = chain_id
        self.iteration = 0
        self._batches = _minibatches(n_rows, config.batch_size, rng)

    def run(self, n_updates, burn_in=0, callback=None):
        """Advance ``n_updates`` steps; keep segment steps ``burn_in + 1 + k * thin``.

        Returns ``(retained list, global iteration indices)``.
        """
        cfg = self.config
        noise_sd = np.sqrt(cfg.step_size)
        kept, kept_idx = [], []
        theta = self.theta
        for s in range(1, n_updates + 1):
            t = self.iteration + 1
            idx = next(self._batches)
            try:
                g = self.grad(theta, idx, cfg.dataset_size / len(idx), self.rng)
            except DivergenceError:
                g = np.full_like(theta, np.nan)
            theta = theta - 0.5 * cfg.step_size * g
            if cfg.mode == "sgld":
                theta = theta + noise_sd * self.rng.standard_normal(theta.shape[0])
            if not np.all(np.isfinite(theta)) or np.abs(theta).max() > DIVERGENCE_LIMIT:
                err = DivergenceError(
                    "chain diverged", iteration=t, last_finite_iteration=t - 1,
                    chain_id=self.chain_id, config=cfg.to_dict(),
                )
                err.retained = (kept, kept_idx)
                raise err
            self.iteration = t
            self.theta = theta
            if callback is not None:
                callback(t, theta)
            if s > burn_in and (s - burn_in - 1) % cfg.thin_interval == 0:
                kept.append(theta)
                kept_idx.append(t)
        return kept, kept_idx


def sample_posterior(grad_neg_log_post, init, n_rows, config, rng, chain_id=0, callback=None):
    """Run a :class:`Chain` for ``config.n_iterations`` with the configured burn-in."""
    chain = Chain(grad_neg_log_post, init, n_rows, config, rng, chain_id)
    return chain.run(config.n_iterations, config.burn_in, callback)


def classifier_grad(spec, x, y, prior_precision):
    """Minibatch gradient of the negative log-posterior of a classifier."""
    use_dropout = spec.dropout_rate > 0

    def grad(theta, idx, scale, rng):
        mask = nn.DropoutMask.draw(spec, rng, n=len(idx)) if use_dropout else None
        return nn.loss_and_grad(spec, theta, x[idx], y[idx], prior_precision, scale, mask)[1]

    return grad


def run_chain(spec, init, x, y, config, rng=None, chain_id=0, callback=None):
    """Run one chain over a classifier and keep iterates ``burn_in + 1 + k * thin_interval``.

    Minibatches are drawn by epoch-shuffled sweeps; the permutation, dropout
    masks (if the spec uses dropout) and Langevin noise all come from ``rng``.
    ``callback(iteration, params)`` is invoked after every update.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    cfg = config.resolved(len(y))
    if rng is None:
        rng = chain_rng(cfg.seed, chain_id)
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (spec.n_params,):
        raise ShapeError(f"init has shape {init.shape}, spec has {spec.n_params} params")
    grad = classifier_grad(spec, x, y, cfg.prior_precision)

    try:
        kept, kept_idx = sample_posterior(grad, init, len(y), cfg, rng, chain_id, callback)
    except DivergenceError as err:
        kept, kept_idx = err.retained
        err.partial = SampleSet(
            np.array(kept).reshape(-1, spec.n_params), spec, cfg.to_dict(), chain_id, np.array(kept_idx)
        )
        raise
    return SampleSet(np.array(kept), spec, cfg.to_dict(), chain_id, np.array(kept_idx))


def chain_rng(master_seed, chain_id):
    """Stream for chain ``chain_id``: SeedSequence keyed by (master_seed, chain_id).

    The spawn key is the chain counter, so adding chains never changes the
    streams of existing ones.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(chain_id,)))


def run_parallel_chains(spec, inits, x, y, config, seeds=None, workers=1):
    """Run ``len(inits)`` independent chains.

    Chain ``k`` uses ``seeds[k]`` as its master seed if given, otherwise the
    ``(config.seed, k)`` stream. A diverging chain returns whatever it had
    retained with ``diverged`` set instead of aborting its siblings.
    """
    k_chains = len(inits)
    if k_chains < 1:
        raise ValueError("need at least one chain")

    def one(k):
        rng = chain_rng(seeds[k], 0) if seeds is not None else chain_rng(config.seed, k)
        try:
            return run_chain(spec, inits[k], x, y, config, rng, chain_id=k)
        except DivergenceError as err:
            partial = err.partial
            partial.diverged = err
            return partial

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool_:
            results = list(pool_.map(one, range(k_chains)))
    else:
        results = [one(k) for k in range(k_chains)]
    return sorted(results, key=lambda s: s.chain_id)


def train_point_estimate(spec, init, x, y, config, n_iterations, rng=None):
    """Plain SGD (dropout if the spec has it); returns the final iterate."""
    cfg = dataclasses.replace(config, mode="sgd", burn_in=n_iterations - 1, thin_interval=1, total_samples=1)
    return run_chain(spec, init, x, y, cfg, rng).samples[0]
