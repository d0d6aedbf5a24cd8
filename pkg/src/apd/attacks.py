"""FGSM and PGD attacks against a single parameter vector (gray-box setting)."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, nn
from .errors import FormatError
from .nn import NetSpec


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.3
    step_size: float = None  # PGD alpha; None means epsilon / 4
    iterations: int = 20
    lo: float = 0.0
    hi: float = 1.0
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "pgd":
            if self.iterations < 1:
                raise ValueError("pgd needs at least one iteration")
            if self.alpha > self.epsilon:
                raise ValueError(f"pgd step {self.alpha} exceeds epsilon {self.epsilon}")

    @property
    def alpha(self):
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def to_dict(self):
        return dataclasses.asdict(self)


def _check_range(x, config):
    if x.min() < config.lo or x.max() > config.hi:
        raise ValueError(f"inputs outside the clamp range [{config.lo}, {config.hi}]")


def fgsm(spec, params, x, y, config):
    """One signed-gradient step of size epsilon, then clamp."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_range(x, config)
    g = nn.grad_input(spec, params, x, np.atleast_1d(y))
    return np.clip(x + config.epsilon * np.sign(g), config.lo, config.hi)


def pgd(spec, params, x, y, config, loss_trace=None):
    """Iterated signed steps of size alpha, projected onto the epsilon box around ``x``.

    ``loss_trace``, when a list, receives the mean loss at every iterate
    (including the start).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    _check_range(x, config)
    lo = np.maximum(x - config.epsilon, config.lo)
    hi = np.minimum(x + config.epsilon, config.hi)
    adv = x.copy()
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        adv = np.clip(x + rng.uniform(-config.epsilon, config.epsilon, x.shape), lo, hi)
    for _ in range(config.iterations):
        if loss_trace is not None:
            loss_trace.append(_mean_loss(spec, params, adv, y))
        g = nn.grad_input(spec, params, adv, y)
        adv = np.clip(adv + config.alpha * np.sign(g), lo, hi)
    if loss_trace is not None:
        loss_trace.append(_mean_loss(spec, params, adv, y))
    return adv


def _mean_loss(spec, params, x, y):
    logp = nn.log_softmax(nn.forward(spec, params, x))
    return float(-logp[np.arange(len(y)), y].mean())


def attack(spec, params, x, y, config):
    return (fgsm if config.kind == "fgsm" else pgd)(spec, params, x, y, config)


@dataclass
class AttackSet:
    adversarial: np.ndarray
    clean: np.ndarray
    labels: np.ndarray
    success: np.ndarray  # source weights misclassify the adversarial input
    config: AttackConfig
    spec: NetSpec = None
    requested: int = 0
    short: bool = False  # fewer inputs were available than requested

    def __len__(self):
        return len(self.labels)

    @property
    def linf(self):
        return np.abs(self.adversarial - self.clean).max(axis=1) if len(self) else np.zeros(0)

    def save(self, stem):
        stem = Path(stem)
        bin_path = io.write_blocks(stem.with_suffix(".bin"), [self.adversarial.ravel(), self.clean.ravel()])
        io.write_json(stem.with_suffix(".json"), {
            "kind": "attack_set",
            "format": io.MAGIC.decode(),
            "config": self.config.to_dict(),
            "spec": self.spec.to_dict() if self.spec else None,
            "count": len(self),
            "input_dim": int(self.clean.shape[1]),
            "labels": self.labels.tolist(),
            "success": self.success.tolist(),
            "requested": self.requested,
            "short": self.short,
            "sha256": io.file_sha256(bin_path),
        })
        with open(stem.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "label", "success", "linf_norm"])
            for i, (lab, ok, norm) in enumerate(zip(self.labels, self.success, self.linf)):
                w.writerow([i, int(lab), int(ok), repr(float(norm))])
        return bin_path

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        meta = io.read_json(stem.with_suffix(".json"))
        if meta.get("kind") != "attack_set":
            raise FormatError(f"{stem}: not an attack set")
        adv, clean = io.read_blocks(stem.with_suffix(".bin"))
        shape = (meta["count"], meta["input_dim"])
        return cls(
            adv.reshape(shape), clean.reshape(shape), np.array(meta["labels"], dtype=np.int64),
            np.array(meta["success"], dtype=bool), AttackConfig(**meta["config"]),
            NetSpec.from_dict(meta["spec"]) if meta["spec"] else None, meta["requested"], meta["short"],
        )


def craft_attack_set(spec, source_params, x, y, config, count):
    """Attack the first ``count`` inputs with one fixed parameter vector.

    Every candidate is kept; ``success`` flags the ones the source weights
    misclassify. If ``x`` has fewer than ``count`` rows the set is shorter and
    ``short`` is set.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = min(count, len(y))
    clean, labels = x[:n], y[:n]
    adv = attack(spec, source_params, clean, labels, config)
    pred = nn.forward(spec, source_params, adv).argmax(axis=1)
    return AttackSet(adv, clean.copy(), labels.copy(), pred != labels, config, spec, count, n < count)
