"""Distilling posterior samples into a generator network.

Parameter vectors drawn by SGLD are treated as data for a GAN. The default
objective is WGAN-GP: the critic minimizes

    mean D(fake) - mean D(real) + gp_lambda * mean (||grad D(x_hat)|| - 1)^2

at random interpolates ``x_hat``, and the generator minimizes ``-mean D(G(z))``.
Weight-clipped WGAN and the non-saturating original GAN are available for
comparison. Training happens in a standardized coordinate system (per-coordinate
shift and scale of the real samples, when enabled); :class:`GeneratorState`
maps back to raw parameters when sampling.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, nn
from .errors import DivergenceError, FormatError, GanDivergenceError, ShapeError
from .nn import NetSpec
from .sgld import Chain, SampleSet, chain_rng, classifier_grad

LOSSES = ("wgan_gp", "wgan_clip", "vanilla")


@dataclass
class GanConfig:
    latent_dim: int = 100
    hidden: tuple = (100, 100, 100)
    activation: str = "leaky_relu"
    slope: float = 0.2
    loss: str = "wgan_gp"
    gp_lambda: float = 10.0
    clip: float = 0.01
    critic_steps: int = 5
    lr: float = 1e-4
    betas: tuple = (0.5, 0.9)
    rmsprop_lr: float = 5e-5
    lr_decay: str = "none"  # "linear": both step sizes fall to 0 over the step budget
    ema: float = 0.0  # decay of the served generator's weight average; 0 serves the last iterate
    batch_size: int = 64
    n_steps: int = 2000
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.lr_decay not in ("none", "linear"):
            raise ValueError(f"lr_decay must be 'none' or 'linear', got {self.lr_decay!r}")
        self.hidden = tuple(self.hidden)
        self.betas = tuple(self.betas)
        if self.gp_lambda < 0 or self.critic_steps < 1 or self.latent_dim < 1:
            raise ValueError("gp_lambda >= 0, critic_steps >= 1 and latent_dim >= 1 required")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError(f"ema must lie in [0, 1), got {self.ema}")

    def generator_spec(self, dim):
        return NetSpec((self.latent_dim, *self.hidden, dim), self.activation, self.slope)

    def critic_spec(self, dim):
        return NetSpec((dim, *self.hidden, 1), self.activation, self.slope)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# building blocks


def interpolate(theta_real, theta_fake, u):
    """``u * real + (1 - u) * fake``; ``u`` is a scalar or one value per row."""
    theta_real = np.asarray(theta_real, dtype=np.float64)
    theta_fake = np.asarray(theta_fake, dtype=np.float64)
    if theta_real.shape != theta_fake.shape:
        raise ShapeError(f"cannot interpolate {theta_real.shape} with {theta_fake.shape}")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1 and theta_real.ndim == 2:
        u = u[:, None]
    return u * theta_real + (1.0 - u) * theta_fake


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def critic_loss_and_grad(critic_spec, critic_params, real, fake, config, u=None, rng=None):
    """Critic objective and its gradient w.r.t. the critic parameters.

    Returns ``(loss, grad, penalty)``; ``penalty`` is the unweighted mean
    gradient penalty (0 for the other objectives). ``u`` holds one
    interpolation weight per pair and is drawn from ``rng`` when omitted.
    """
    real = np.atleast_2d(real)
    fake = np.atleast_2d(fake)
    m_r, m_f = len(real), len(fake)
    both = np.concatenate([real, fake])
    layers = nn.unflatten(critic_spec, critic_params)
    with np.errstate(invalid="ignore", over="ignore"):
        zs, acts = nn._run(critic_spec, layers, both)
    d = zs[-1][:, 0]
    d_r, d_f = d[:m_r], d[m_r:]
    if config.loss == "vanilla":
        loss = _softplus(-d_r).mean() + _softplus(d_f).mean()
        dout = np.concatenate([-_sigmoid(-d_r) / m_r, _sigmoid(d_f) / m_f])
    else:
        loss = d_f.mean() - d_r.mean()
        dout = np.concatenate([np.full(m_r, -1.0 / m_r), np.full(m_f, 1.0 / m_f)])
    grad, _ = nn._backward(critic_spec, layers, zs, acts, dout[:, None])
    penalty = 0.0
    if config.loss == "wgan_gp" and config.gp_lambda > 0:
        if m_r != m_f:
            raise ShapeError("gradient penalty needs equal real and fake batch sizes")
        if u is None:
            u = rng.random(m_r)
        x_hat = interpolate(real, fake, u)
        penalty, g_pen = nn.grad_param_of_input_grad_norm(critic_spec, critic_params, x_hat)
        loss = loss + config.gp_lambda * penalty
        grad += config.gp_lambda * g_pen
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise GanDivergenceError("critic loss or gradient is not finite")
    return float(loss), grad, float(penalty)


def generator_loss_and_grad(gen_spec, gen_params, critic_spec, critic_params, z, config):
    """Generator objective and its gradient w.r.t. the generator parameters."""
    g_layers = nn.unflatten(gen_spec, gen_params)
    g_zs, g_acts = nn._run(gen_spec, g_layers, np.atleast_2d(z))
    fake = g_zs[-1]
    m = len(fake)
    c_layers = nn.unflatten(critic_spec, critic_params)
    c_zs, c_acts = nn._run(critic_spec, c_layers, fake)
    d = c_zs[-1][:, 0]
    if config.loss == "vanilla":
        loss = _softplus(-d).mean()
        dout = -_sigmoid(-d) / m
    else:
        loss = -d.mean()
        dout = np.full(m, -1.0 / m)
    _, d_fake = nn._backward(critic_spec, c_layers, c_zs, c_acts, dout[:, None], want_input=True)
    grad, _ = nn._backward(gen_spec, g_layers, g_zs, g_acts, d_fake)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise GanDivergenceError("generator loss or gradient is not finite")
    return float(loss), grad


class Adam:
    def __init__(self, size, lr, betas=(0.5, 0.9), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self._buf = np.empty(size)
        self.t = 0
        self.lr_scale = 1.0

    def step(self, params, grad):
        self.t += 1
        b1, b2, buf = self.b1, self.b2, self._buf
        self.m *= b1
        np.multiply(grad, 1 - b1, out=buf)
        self.m += buf
        self.v *= b2
        np.multiply(grad, grad, out=buf)
        buf *= 1 - b2
        self.v += buf
        # lr * m_hat / (sqrt(v_hat) + eps), bias corrections folded into scalars
        np.sqrt(self.v, out=buf)
        buf *= 1.0 / np.sqrt(1 - b2 ** self.t)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= self.lr_scale * self.lr / (1 - b1 ** self.t)
        params -= buf


class RMSprop:
    def __init__(self, size, lr, rho=0.9, eps=1e-8):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.v = np.zeros(size)
        self.lr_scale = 1.0

    def step(self, params, grad):
        self.v *= self.rho
        self.v += (1 - self.rho) * grad * grad
        params -= self.lr_scale * self.lr * grad / (np.sqrt(self.v) + self.eps)


# --------------------------------------------------------------------------
# generator state


@dataclass
class GeneratorState:
    """Everything needed to draw parameter vectors from a trained generator."""

    spec: NetSpec
    params: np.ndarray
    target_spec: NetSpec
    shift: np.ndarray = None
    scale: np.ndarray = None
    step: int = 0
    config: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        dim = self.spec.output_dim
        if dim != self.target_spec.n_params:
            raise ShapeError(f"generator emits {dim} values, target spec has {self.target_spec.n_params}")
        if self.shift is None:
            self.shift = np.zeros(dim)
        if self.scale is None:
            self.scale = np.ones(dim)

    @property
    def latent_dim(self):
        return self.spec.input_dim

    def generate(self, z):
        """Raw parameter vectors for the given latent rows."""
        return self.shift + self.scale * nn.forward(self.spec, self.params, z)

    def sample_params(self, count, rng):
        return self.generate(rng.standard_normal((count, self.latent_dim)))

    def save(self, stem):
        stem = Path(stem)
        bin_path = io.write_blocks(stem.with_suffix(".bin"), [self.params, self.shift, self.scale])
        io.write_json(stem.with_suffix(".json"), {
            "kind": "generator",
            "format": io.MAGIC.decode(),
            "spec": self.spec.to_dict(),
            "target_spec": self.target_spec.to_dict(),
            "latent_dim": self.latent_dim,
            "step": self.step,
            "config": self.config,
            "sha256": io.file_sha256(bin_path),
        })
        return bin_path

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        meta = io.read_json(stem.with_suffix(".json"))
        if meta.get("kind") != "generator" or meta.get("format") != io.MAGIC.decode():
            raise FormatError(f"{stem}: not an {io.MAGIC.decode()} generator")
        params, shift, scale = io.read_blocks(stem.with_suffix(".bin"))
        return cls(
            NetSpec.from_dict(meta["spec"]), params, NetSpec.from_dict(meta["target_spec"]),
            shift, scale, meta["step"], meta["config"],
        )


def sample(state, count, rng):
    """``count`` independent draws ``G(z)``, ``z ~ N(0, I)``, as a SampleSet."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return SampleSet(state.sample_params(count, rng), state.target_spec, {"source": "generator", "step": state.step})


def write_trace(path, trace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "critic_loss", "gen_loss", "penalty"])
        w.writerows(trace)


# --------------------------------------------------------------------------
# training


class GanTrainer:
    """Alternating critic/generator updates over a matrix of real samples."""

    def __init__(self, dim, config, rng=None, horizon=None):
        self.config = config
        self.horizon = horizon or config.n_steps
        self.dim = dim
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.gen_spec = config.generator_spec(dim)
        self.critic_spec = config.critic_spec(dim)
        self.gen_params = nn.init_params(self.gen_spec, self.rng)
        self.critic_params = nn.init_params(self.critic_spec, self.rng)
        if config.loss == "wgan_clip":
            self.gen_opt = RMSprop(self.gen_spec.n_params, config.rmsprop_lr)
            self.critic_opt = RMSprop(self.critic_spec.n_params, config.rmsprop_lr)
            np.clip(self.critic_params, -config.clip, config.clip, out=self.critic_params)
        else:
            self.gen_opt = Adam(self.gen_spec.n_params, config.lr, config.betas)
            self.critic_opt = Adam(self.critic_spec.n_params, config.lr, config.betas)
        self.avg_params = self.gen_params.copy() if config.ema > 0 else None
        self.shift = None
        self.scale = None
        self.step = 0
        self.trace = []

    def set_normalization(self, data):
        if self.config.standardize:
            self.shift = data.mean(axis=0)
            sd = data.std(axis=0)
            self.scale = np.where(sd > 1e-8, sd, 1.0)
        else:
            self.shift = np.zeros(self.dim)
            self.scale = np.ones(self.dim)

    def _fake(self, m):
        z = self.rng.standard_normal((m, self.config.latent_dim))
        return z, nn.forward(self.gen_spec, self.gen_params, z)

    def train(self, data, n_steps, callback=None):
        """Run ``n_steps`` generator updates against rows of ``data`` (raw coordinates)."""
        cfg = self.config
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or len(data) == 0:
            raise ValueError("need a non-empty (n, dim) matrix of real samples")
        if self.shift is None:
            self.set_normalization(data)
        n = len(data)
        m = cfg.batch_size
        for _ in range(n_steps):
            if cfg.lr_decay == "linear":
                frac = max(0.0, 1.0 - self.step / self.horizon)
                self.gen_opt.lr_scale = self.critic_opt.lr_scale = frac
            try:
                for _ in range(cfg.critic_steps):
                    real = (data[self.rng.integers(0, n, m)] - self.shift) / self.scale
                    _, fake = self._fake(m)
                    c_loss, c_grad, pen = critic_loss_and_grad(
                        self.critic_spec, self.critic_params, real, fake, cfg, rng=self.rng
                    )
                    self.critic_opt.step(self.critic_params, c_grad)
                    if cfg.loss == "wgan_clip":
                        np.clip(self.critic_params, -cfg.clip, cfg.clip, out=self.critic_params)
                z = self.rng.standard_normal((m, cfg.latent_dim))
                g_loss, g_grad = generator_loss_and_grad(
                    self.gen_spec, self.gen_params, self.critic_spec, self.critic_params, z, cfg
                )
                self.gen_opt.step(self.gen_params, g_grad)
                if self.avg_params is not None:
                    self.avg_params += (1.0 - cfg.ema) * (self.gen_params - self.avg_params)
            except GanDivergenceError as err:
                err.context["step"] = self.step + 1
                raise
            if not np.all(np.isfinite(self.gen_params)):
                raise GanDivergenceError("generator parameters diverged", step=self.step + 1)
            self.step += 1
            self.trace.append((self.step, c_loss, g_loss, pen))
            if callback is not None:
                callback(self)

    def state(self, target_spec):
        # the served generator lives on the float32 grid it is persisted with
        served = self.gen_params if self.avg_params is None else self.avg_params
        return GeneratorState(
            self.gen_spec, io.as_float32_grid(served), target_spec,
            io.as_float32_grid(self.shift), io.as_float32_grid(self.scale),
            self.step, self.config.to_dict(), list(self.trace),
        )


def train_offline(sample_set, config, callback=None):
    """Fit a generator to a fixed set of posterior samples."""
    if len(sample_set) == 0:
        raise ValueError("cannot distill an empty sample set")
    trainer = GanTrainer(sample_set.spec.n_params, config)
    trainer.train(sample_set.samples, config.n_steps, callback)
    return trainer.state(sample_set.spec)


class ReplayBuffer:
    """Bounded FIFO of parameter vectors backed by a ring array.

    ``capacity=None`` grows without bound. Until the first eviction, rows are
    stored in insertion order.
    """

    def __init__(self, dim, capacity=2000):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.dim = dim
        self.capacity = capacity
        self._data = np.empty((capacity if capacity else 256, dim))
        self.size = 0
        self.inserted = 0
        self._head = 0  # next write slot

    def __len__(self):
        return self.size

    def add(self, rows):
        for row in np.atleast_2d(rows):
            if self.capacity is None and self.size == len(self._data):
                grown = np.empty((2 * len(self._data), self.dim))
                grown[: self.size] = self._data[: self.size]
                self._data = grown
            self._data[self._head] = row
            self._head += 1
            if self.capacity is not None:
                self._head %= self.capacity
            self.size = min(self.size + 1, self.capacity or self.size + 1)
            self.inserted += 1

    def view(self):
        """Stored rows (storage order; equals insertion order before wrap-around)."""
        return self._data[: self.size]

    def ordered(self):
        """Stored rows oldest first."""
        if self.capacity is None or self.size < self.capacity:
            return self._data[: self.size].copy()
        return np.roll(self._data, -self._head, axis=0)


@dataclass
class OnlineReport:
    state: GeneratorState
    buffer: ReplayBuffer
    inserted_per_round: list
    chains: list


def train_online(spec, x, y, sampler_config, gan_config, n_chains=1, t_mcmc=100, t_gan=100,
                 n_rounds=10, capacity=2000, inits=None, continue_chains=False, callback=None):
    """Interleave MCMC segments with GAN updates.

    Each round advances every chain by ``t_mcmc`` updates (burn-in applies to
    the first round only; thinning to all), pushes the retained iterates into
    the replay buffer, then runs ``t_gan`` generator steps on the buffer.
    Chains start from ``inits`` (or generator draws when ``inits`` is None)
    and restart from fresh generator draws every later round unless
    ``continue_chains`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    cfg = sampler_config.resolved(len(y))
    dim = spec.n_params
    trainer = GanTrainer(dim, gan_config, horizon=n_rounds * t_gan)
    reinit_rng = np.random.default_rng(np.random.SeedSequence(gan_config.seed, spawn_key=(1,)))
    grad = classifier_grad(spec, x, y, cfg.prior_precision)
    buffer = ReplayBuffer(dim, capacity)
    chains = []
    for k in range(n_chains):
        init = inits[k] if inits is not None else _draw_init(trainer, spec, reinit_rng)
        chains.append(Chain(grad, init, len(y), cfg, chain_rng(cfg.seed, k), chain_id=k))

    inserted = []
    for r in range(n_rounds):
        if r > 0 and not continue_chains:
            for chain in chains:
                chain.theta = _draw_init(trainer, spec, reinit_rng)
        before = buffer.inserted
        for chain in chains:
            kept, _ = chain.run(t_mcmc, burn_in=cfg.burn_in if r == 0 else 0)
            buffer.add(np.array(kept).reshape(-1, dim))
        inserted.append(buffer.inserted - before)
        if len(buffer) == 0:
            continue
        trainer.train(buffer.view(), t_gan)
        if callback is not None:
            callback(r, trainer, buffer)
    return OnlineReport(trainer.state(spec), buffer, inserted, chains)


def _draw_init(trainer, spec, rng):
    z = rng.standard_normal((1, trainer.config.latent_dim))
    out = nn.forward(trainer.gen_spec, trainer.gen_params, z)[0]
    if trainer.shift is not None:
        out = trainer.shift + trainer.scale * out
    return out
