"""Experiment pipelines behind the command-line harness.

A config is a nested dict. A profile supplies every key and user files may
only override keys that already exist. Each random stream is derived from
the master seed and a stream name, so adding an arm to an experiment never
shifts the draws of another arm.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, datasets, distill, io, metrics, mog, nn, uncertainty
from .attacks import AttackConfig
from .distill import GanConfig
from .errors import ConfigError, GanDivergenceError
from .nn import NetSpec
from .sgld import SampleSet, SamplerConfig, run_chain, train_point_estimate

EXPERIMENTS = ("toy2d", "train-sgld", "distill", "anomaly", "active-learn", "attack-detect", "gan-compare", "mog-sweep")
METHODS = ("sgd", "sgd_dropout", "mc_dropout", "sgld", "apd", "mog")
POINT_METHODS = ("sgd", "sgd_dropout")
OOD_KINDS = ("gaussian_noise", "uniform_noise")
# a single softmax has no vote spread, so VR falls back to 1 - max probability
POINT_MEASURES = {"vr": "max_prob", "entropy": "entropy", "max_prob": "max_prob"}

_GAN_DEFAULTS = {k: v for k, v in GanConfig(n_steps=1500).to_dict().items() if k != "seed"}

DESK = {
    "seed": 0,
    "data": {
        "source": "digits", "path": None, "split_seed": 0,
        "train_images": None, "train_labels": None, "test_images": None, "test_labels": None, "n_val": 10000,
    },
    "net": {"hidden": [100], "activation": "relu", "slope": 0.2},
    "sgd": {"n_iterations": 5000, "step_size": None, "batch_size": 100, "prior_precision": 1.0},
    "dropout": {"rate": 0.5, "n_iterations": 5000},
    "sampler": {
        "burn_in": 500, "thin_interval": 20, "total_samples": 2000, "batch_size": 100,
        "step_size": None, "prior_precision": 1.0, "init": "sgd",
    },
    "gan": _GAN_DEFAULTS,
    "mog": {"components": [1, 5, 20, 60], "max_iters": 500, "tol": 1e-4, "measure": "entropy", "T": 200},
    "anomaly": {
        "methods": ["sgd", "mc_dropout", "sgld", "apd"],
        "measures": ["vr", "entropy", "bald", "model_variance"],
        "ood_kinds": list(OOD_KINDS), "scale_factor": 5.0, "ood_count": None, "T": 200,
        "sweep_measure": "vr", "T_sweep": [10, 50, 100, 200], "scale_sweep": [],
        "gen_hidden_sweep": [], "mog_components": 60,
    },
    "attack": {
        "epsilon": 0.3, "pgd_iterations": 20, "pgd_step": None, "count": 600, "split": "val",
        "sources": ["mc_dropout", "sgld", "apd"], "defenders": ["mc_dropout", "sgld", "apd"],
        "attacks": ["fgsm", "pgd"], "transfer": True, "measure": "model_variance", "T": 200,
    },
    "gan_compare": {"variants": ["wgan_gp", "wgan_clip", "vanilla"], "checkpoint_every": 100, "measure": "vr", "T": 200},
    "active": {
        "methods": ["sgd", "sgd_dropout", "mc_dropout", "sgld", "apd"], "acquisitions": ["entropy", "random"],
        "rounds": 10, "initial_per_class": 2, "acquire": 10, "T": 100, "sgd_iterations": 2000,
        "burn_in": 200, "thin_interval": 10, "total_samples": 100, "gan_steps": 100,
    },
    "toy2d": {
        "n_per_class": 10, "hidden": [10, 10], "sgd_iterations": 2000, "T": 200,
        "prior_precision": 0.1, "thin_interval": 5, "gan_steps": 3000, "gan_lr": 1e-3, "gan_ema": 0.995,
        "grid_resolution": 50, "grid_extent": None, "ring_factor": 5.0, "ring_points": 360,
    },
    "distill": {
        "mode": "offline", "chains": 1, "t_mcmc": 1000, "t_gan": 100, "rounds": 10,
        "capacity": 2000, "continue_chains": False,
    },
}

FULL = copy.deepcopy(DESK)
FULL["data"]["source"] = "idx"
FULL["attack"].update(T=1000, count=6000)

PROFILES = {"desk": DESK, "full": FULL}


# --------------------------------------------------------------------------
# config


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def make_config(profile="desk", overrides=None, seed=None):
    """Profile defaults, then ``overrides``, then ``seed``; validated."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = _merge(PROFILES[profile], overrides or {})
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def load_config(path=None, profile=None, seed=None):
    """Read a JSON override file; an explicit ``profile`` beats the file's own."""
    overrides = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        file_profile = overrides.pop("profile", None)
        profile = profile or file_profile
    return make_config(profile or "desk", overrides, seed)


def _check_subset(values, allowed, where):
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ConfigError(f"{where}: unknown entries {bad}; allowed {list(allowed)}")


def validate(cfg):
    if cfg["data"]["source"] not in ("digits", "idx"):
        raise ConfigError(f"data.source must be 'digits' or 'idx', got {cfg['data']['source']!r}")
    if cfg["sampler"]["init"] not in ("sgd", "random"):
        raise ConfigError("sampler.init must be 'sgd' or 'random'")
    an = cfg["anomaly"]
    _check_subset(an["methods"], METHODS, "anomaly.methods")
    _check_subset(an["measures"], uncertainty.MEASURES, "anomaly.measures")
    _check_subset(an["ood_kinds"], OOD_KINDS, "anomaly.ood_kinds")
    _check_subset(cfg["attack"]["sources"], METHODS, "attack.sources")
    _check_subset(cfg["attack"]["defenders"], METHODS, "attack.defenders")
    _check_subset(cfg["attack"]["attacks"], ("fgsm", "pgd"), "attack.attacks")
    _check_subset(cfg["active"]["methods"], METHODS[:-1], "active.methods")
    _check_subset(cfg["active"]["acquisitions"], ("entropy", "random"), "active.acquisitions")
    _check_subset(cfg["gan_compare"]["variants"], distill.LOSSES, "gan_compare.variants")
    if cfg["distill"]["mode"] not in ("offline", "online"):
        raise ConfigError("distill.mode must be 'offline' or 'online'")
    for measure in (cfg["mog"]["measure"], an["sweep_measure"], cfg["attack"]["measure"], cfg["gan_compare"]["measure"]):
        _check_subset([measure], uncertainty.MEASURES, "measure")
    try:
        GanConfig(**cfg["gan"])
        AttackConfig("pgd", cfg["attack"]["epsilon"], cfg["attack"]["pgd_step"], cfg["attack"]["pgd_iterations"])
        _sampler(cfg["sampler"], 0)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return cfg


def _sampler(section, seed, **extra):
    keys = ("burn_in", "thin_interval", "total_samples", "batch_size", "step_size", "prior_precision")
    return SamplerConfig(**{k: section[k] for k in keys}, seed=seed, **extra)


# --------------------------------------------------------------------------
# data


@dataclass
class Splits:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    manifest: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.x_train.shape[1]

    @classmethod
    def from_dataset(cls, ds):
        parts = [ds.split(name) for name in ("train", "val", "test")]
        return cls(*parts[0], *parts[1], *parts[2], ds.n_classes, ds.manifest())


def load_data(cfg):
    d = cfg["data"]
    if d["source"] == "digits":
        return Splits.from_dataset(datasets.load_digits_csv(d["path"], d["split_seed"]))
    paths = [d[k] for k in ("train_images", "train_labels", "test_images", "test_labels")]
    if not all(paths):
        raise ConfigError("data.source 'idx' needs train_images, train_labels, test_images and test_labels")
    train = datasets.load_idx(paths[0], paths[1], d["split_seed"], n_val=d["n_val"])
    test = datasets.load_idx(paths[2], paths[3])
    x_tr, y_tr = train.split("train")
    x_va, y_va = train.split("val")
    x_te, y_te = test.split("test")
    manifest = {"train": train.manifest(), "test": test.manifest()}
    return Splits(x_tr, y_tr, x_va, y_va, x_te, y_te, 10, manifest)


def toy_splits(cfg, rng):
    ds = datasets.make_toy2d(rng, cfg["toy2d"]["n_per_class"])
    x, y = ds.split("train")
    return Splits(x, y, x, y, x, y, 2, ds.manifest())


# --------------------------------------------------------------------------
# results


def _cell(v):
    if v is None:
        return "-"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def _parse(s):
    if s == "-":
        return None
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


@dataclass
class ExperimentResult:
    """Metrics, tidy tables and artifact hashes of one run.

    ``tables`` maps a name to ``{"header": [...], "rows": [[...], ...]}``.
    Wall-clock timings live in ``timing`` and are written to their own file
    so the remaining outputs are identical across reruns.
    """

    kind: str
    config: dict
    metrics: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def add_table(self, name, header, rows):
        self.tables[name] = {"header": list(header), "rows": [list(r) for r in rows]}

    def save(self, out):
        out = Path(out)
        (out / "tables").mkdir(parents=True, exist_ok=True)
        for name, t in self.tables.items():
            with open(out / "tables" / f"{name}.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(t["header"])
                w.writerows([_cell(v) for v in row] for row in t["rows"])
        io.write_json(out / "config.json", self.config)
        io.write_json(out / "timing.json", self.timing)
        io.write_json(out / "result.json", {
            "kind": self.kind,
            "metrics": self.metrics,
            "tables": sorted(self.tables),
            "artifacts": self.artifacts,
            "notes": self.notes,
        })
        return out

    @classmethod
    def load(cls, out):
        out = Path(out)
        meta = io.read_json(out / "result.json")
        tables = {}
        for name in meta["tables"]:
            with open(out / "tables" / f"{name}.csv", newline="") as f:
                rows = list(csv.reader(f))
            tables[name] = {"header": rows[0], "rows": [[_parse(c) for c in r] for r in rows[1:]]}
        timing = io.read_json(out / "timing.json") if (out / "timing.json").exists() else {}
        return cls(meta["kind"], io.read_json(out / "config.json"), meta["metrics"], tables,
                   meta["artifacts"], meta["notes"], timing)


# --------------------------------------------------------------------------
# shared pipeline


class Pipeline:
    """Lazily trains and caches the models an experiment needs.

    With ``out`` set, every trained artifact is written below
    ``out/artifacts`` and its content hash is recorded in ``artifacts``.
    """

    def __init__(self, config, out=None, data=None):
        self.config = config
        self.seed = config["seed"]
        self.out = Path(out) if out is not None else None
        self._data = data
        self._cache = {}
        self.artifacts = {}
        self.gan_runs = {}
        self.timing = {}

    # random streams ------------------------------------------------------

    def seed_sequence(self, name):
        return np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))

    def rng(self, name):
        return np.random.default_rng(self.seed_sequence(name))

    def seed_int(self, name):
        return int(self.seed_sequence(name).generate_state(1)[0])

    # data and models -----------------------------------------------------

    @property
    def data(self):
        if self._data is None:
            self._data = load_data(self.config)
        return self._data

    @property
    def spec(self):
        net = self.config["net"]
        return NetSpec((self.data.input_dim, *net["hidden"], self.data.n_classes), net["activation"], net["slope"])

    @property
    def dropout_spec(self):
        return dataclasses.replace(self.spec, dropout_rate=self.config["dropout"]["rate"])

    def _memo(self, key, build):
        if key not in self._cache:
            t0 = time.perf_counter()
            self._cache[key] = build()
            self.timing[str(key)] = time.perf_counter() - t0
        return self._cache[key]

    def _record(self, name, path):
        rel = Path(path).relative_to(self.out)
        self.artifacts[name] = {"path": str(rel), "sha256": io.file_sha256(path)}

    def init_params(self):
        return nn.init_params(self.spec, self.rng("init"))

    def fit_point(self, spec, x, y, n_iterations, stream):
        s = self.config["sgd"]
        step = s["step_size"] or 0.1 / len(y)
        cfg = SamplerConfig(step_size=step, batch_size=min(s["batch_size"], len(y)),
                            prior_precision=s["prior_precision"], mode="sgd")
        init = nn.init_params(spec, self.rng(stream + "/init"))
        return train_point_estimate(spec, init, x, y, cfg, n_iterations, self.rng(stream))

    def sgd(self):
        def build():
            p = self.fit_point(self.spec, self.data.x_train, self.data.y_train,
                               self.config["sgd"]["n_iterations"], "sgd")
            if self.out is not None:
                self._record("sgd", io.write_blocks(self.out / "artifacts" / "sgd.bin", [p]))
            return p

        return self._memo("sgd", build)

    def dropout_net(self):
        def build():
            p = self.fit_point(self.dropout_spec, self.data.x_train, self.data.y_train,
                               self.config["dropout"]["n_iterations"], "dropout")
            if self.out is not None:
                self._record("dropout", io.write_blocks(self.out / "artifacts" / "dropout.bin", [p]))
            return uncertainty.DropoutSource(self.dropout_spec, p)

        return self._memo("dropout", build)

    def sampler_config(self):
        return _sampler(self.config["sampler"], self.seed_int("sgld"))

    def sgld(self):
        def build():
            init = self.sgd() if self.config["sampler"]["init"] == "sgd" else self.init_params()
            s = run_chain(self.spec, init, self.data.x_train, self.data.y_train, self.sampler_config())
            if self.out is not None:
                self._record("sgld", s.save(self.out / "artifacts" / "sgld"))
            return s

        return self._memo("sgld", build)

    def gan_config(self, loss=None, hidden=None):
        g = dict(self.config["gan"])
        loss = loss or g["loss"]
        g["loss"] = loss
        name = f"gan/{loss}"
        if hidden is not None:
            g["hidden"] = hidden
            name += "/" + "x".join(map(str, hidden))
        return GanConfig(**g, seed=self.seed_int(name))

    def generator(self, loss=None, hidden=None, tolerate=False):
        """Distill the SGLD set; checkpoints are scored as training runs.

        With ``tolerate`` a diverging run returns None and is recorded in
        ``gan_runs`` instead of raising.
        """
        cfg = self.gan_config(loss, hidden)
        key = ("generator", cfg.loss, tuple(cfg.hidden))

        def build():
            samples = self.sgld()
            trainer = distill.GanTrainer(self.spec.n_params, cfg)
            every = self.config["gan_compare"]["checkpoint_every"]
            trace = []

            def checkpoint(tr):
                if every and tr.step % every == 0:
                    trace.append({"step": tr.step, **self.checkpoint_scores(tr.state(self.spec))})

            run = {"trace": trace, "status": "ok", "config": cfg.to_dict()}
            self.gan_runs[key] = run
            try:
                trainer.train(samples.samples, cfg.n_steps, checkpoint)
            except GanDivergenceError as err:
                run["status"] = f"diverged at step {err.context.get('step')}"
                run["error"] = err
                return None
            state = trainer.state(self.spec)
            if self.out is not None:
                stem = self.out / "artifacts" / f"generator_{cfg.loss}_{'x'.join(map(str, cfg.hidden))}"
                self._record(stem.name, state.save(stem))
                distill.write_trace(stem.with_suffix(".trace.csv"), state.trace)
            return state

        state = self._memo(key, build)
        if state is None and not tolerate:
            raise self.gan_runs[key]["error"]
        return state

    def mog(self, n_components):
        def build():
            c = self.config["mog"]
            model = mog.em_fit(self.sgld().samples, n_components, c["max_iters"], c["tol"],
                               self.rng(f"mog/{n_components}"), spec=self.spec)
            if self.out is not None:
                self._record(f"mog_{n_components}", model.save(self.out / "artifacts" / f"mog_{n_components}"))
            return model

        return self._memo(("mog", n_components), build)

    def source(self, method, mog_components=None):
        if method == "sgd":
            return self.sgd()
        if method == "sgd_dropout":
            return self.dropout_net().params
        if method == "mc_dropout":
            return self.dropout_net()
        if method == "sgld":
            return self.sgld()
        if method == "apd":
            return self.generator()
        if method == "mog":
            return self.mog(mog_components or self.config["anomaly"]["mog_components"])
        raise ConfigError(f"unknown method {method!r}")

    # scoring -------------------------------------------------------------

    def ood(self, kind, scale=None):
        an = self.config["anomaly"]
        count = an["ood_count"] or len(self.data.y_test)
        factor = an["scale_factor"] if scale is None else scale
        return datasets.gen_ood(datasets.OodSpec(kind, factor, count, self.seed_int(f"ood/{kind}")), self.data.input_dim)

    def predict(self, method, x, T, stream, source=None):
        """Predictive stack; every row of ``x`` sees the same parameter draws."""
        src = self.source(method) if source is None else source
        if method in POINT_METHODS:
            return uncertainty.predict(self.spec, src, x, 1)
        return uncertainty.predict(self.spec, src, x, T, self.rng(stream))

    @staticmethod
    def scores(method, probs, measure):
        if method in POINT_METHODS:
            measure = POINT_MEASURES.get(measure)
            if measure is None:
                return None
        return uncertainty.score(probs, measure)

    def ood_reports(self, method, T, measures, kinds=None, scale=None, source=None, stream="score"):
        """``{measure: {kind: detection report or None}}`` and test accuracy."""
        kinds = kinds or self.config["anomaly"]["ood_kinds"]
        blocks = [self.data.x_test] + [self.ood(k, scale) for k in kinds]
        probs = self.predict(method, np.concatenate(blocks), T, f"{stream}/{method}", source)
        n_in = len(self.data.x_test)
        acc = metrics.accuracy(probs[:n_in].mean(axis=1).argmax(axis=1), self.data.y_test)
        out = {}
        for measure in measures:
            s = self.scores(method, probs, measure)
            out[measure] = {}
            start = n_in
            for k, block in zip(kinds, blocks[1:]):
                stop = start + len(block)
                out[measure][k] = None if s is None else metrics.detection_report(s[:n_in], s[start:stop])
                start = stop
        return out, acc

    def checkpoint_scores(self, state):
        gc = self.config["gan_compare"]
        reports, acc = self.ood_reports("apd", gc["T"], [gc["measure"]], source=state, stream="checkpoint")
        aurocs = {k: r["auroc"] for k, r in reports[gc["measure"]].items()}
        return {"auroc": aurocs, "mean_auroc": float(np.mean(list(aurocs.values()))), "accuracy": acc}

    def result(self, kind):
        return ExperimentResult(kind, self.config, artifacts=self.artifacts, timing=self.timing)


def _mean_auroc(reports):
    return float(np.mean([r["auroc"] for r in reports.values()]))


# --------------------------------------------------------------------------
# experiments


def run_toy2d(config, out=None):
    """Predictive entropy of SGD, SGLD and APD near and far from two clusters."""
    t = config["toy2d"]
    cfg = copy.deepcopy(config)
    cfg["net"].update(hidden=list(t["hidden"]), activation="relu")
    cfg["sgd"].update(n_iterations=t["sgd_iterations"], prior_precision=t["prior_precision"])
    cfg["sampler"].update(prior_precision=t["prior_precision"], thin_interval=t["thin_interval"])
    cfg["gan"].update(n_steps=t["gan_steps"], lr=t["gan_lr"], ema=t["gan_ema"])
    cfg["gan_compare"]["checkpoint_every"] = 0
    probe = Pipeline(cfg)
    data = toy_splits(cfg, probe.rng("toy2d/data"))
    pipe = Pipeline(cfg, out, data)
    x = data.x_train
    center = x.mean(axis=0)
    spread = float(np.sqrt(((x - center) ** 2).sum(axis=1).mean()))
    radius = t["ring_factor"] * spread
    angles = 2 * np.pi * np.arange(t["ring_points"]) / t["ring_points"]
    ring = center + radius * np.c_[np.cos(angles), np.sin(angles)]
    extent = t["grid_extent"] or 1.2 * radius
    axis = np.linspace(-extent, extent, t["grid_resolution"])
    gx, gy = np.meshgrid(center[0] + axis, center[1] + axis)
    grid = np.c_[gx.ravel(), gy.ravel()]

    res = pipe.result("toy2d")
    rows, summary = [], []
    far, near = {}, {}
    for method in ("sgd", "sgld", "apd"):
        probs = pipe.predict(method, np.concatenate([x, ring, grid]), t["T"], f"toy2d/{method}")
        mean = probs.mean(axis=1)
        ent = uncertainty.score(probs, "entropy")
        n, r = len(x), len(ring)
        near[method] = float(ent[:n].mean())
        far[method] = float(ent[n:n + r].mean())
        for (px, py), p1, e in zip(grid, mean[n + r:, 1], ent[n + r:]):
            rows.append([method, float(px), float(py), float(p1), float(e)])
        summary.append([method, near[method], far[method]])
    res.add_table("grid", ["method", "x", "y", "p_class1", "entropy"], rows)
    res.add_table("entropy", ["method", "near_entropy", "far_entropy"], summary)
    res.metrics = {
        "near_entropy": near,
        "far_entropy": far,
        "far_ratio_vs_sgd": {m: far[m] / far["sgd"] if far["sgd"] > 0 else None for m in ("sgld", "apd")},
        "ring_radius": radius,
        "data_spread": spread,
        "grid_resolution": t["grid_resolution"],
    }
    return res


def run_train_sgld(config, out=None, pipe=None):
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    s = pipe.sgld()
    reports, acc = pipe.ood_reports("sgld", min(config["anomaly"]["T"], len(s)), ["vr"])
    res = pipe.result("train-sgld")
    res.metrics = {
        "n_samples": len(s),
        "iterations": int(s.indices[-1]),
        "sgd_accuracy": metrics.accuracy(nn.forward(pipe.spec, pipe.sgd(), pipe.data.x_test).argmax(axis=1),
                                         pipe.data.y_test),
        "sgld_accuracy": acc,
        "vr_auroc": {k: r["auroc"] for k, r in reports["vr"].items()},
    }
    res.add_table("retained", ["position", "iteration"], [[i, int(t)] for i, t in enumerate(s.indices)])
    return res


def run_distill(config, out=None, pipe=None):
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    d = config["distill"]
    res = pipe.result("distill")
    if d["mode"] == "offline":
        state = pipe.generator()
        trace = pipe.gan_runs[("generator", state.config["loss"], tuple(state.config["hidden"]))]["trace"]
        res.add_table("checkpoints", ["step", "mean_auroc", "accuracy"],
                      [[c["step"], c["mean_auroc"], c["accuracy"]] for c in trace])
    else:
        sampler = pipe.sampler_config()
        inits = [pipe.sgd()] * d["chains"] if config["sampler"]["init"] == "sgd" else None
        report = distill.train_online(
            pipe.spec, pipe.data.x_train, pipe.data.y_train, sampler, pipe.gan_config(),
            n_chains=d["chains"], t_mcmc=d["t_mcmc"], t_gan=d["t_gan"], n_rounds=d["rounds"],
            capacity=d["capacity"], inits=inits, continue_chains=d["continue_chains"],
        )
        state = report.state
        res.metrics["inserted_per_round"] = report.inserted_per_round
        if out is not None:
            pipe._record("generator_online", state.save(pipe.out / "artifacts" / "generator_online"))
    gc = config["gan_compare"]
    reports, acc = pipe.ood_reports("apd", gc["T"], [gc["measure"]], source=state)
    res.metrics.update(final_auroc={k: r["auroc"] for k, r in reports[gc["measure"]].items()},
                       accuracy=acc, steps=state.step)
    res.add_table("gan_trace", ["step", "critic_loss", "gen_loss", "penalty"], state.trace)
    return res


def run_anomaly(config, out=None, pipe=None):
    """Detection of test vs. OOD inputs, per method, measure and OOD kind."""
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    an = config["anomaly"]
    res = pipe.result("anomaly")
    long_rows, acc_rows, summary = [], [], {}
    for method in an["methods"]:
        reports, acc = pipe.ood_reports(method, an["T"], an["measures"])
        summary[method] = {"accuracy": acc}
        acc_rows.append([method, acc])
        for measure, by_kind in reports.items():
            summary[method][measure] = by_kind
            for kind, r in by_kind.items():
                vals = [None] * 3 if r is None else [r["auroc"], r["aupr_pos"], r["aupr_neg"]]
                long_rows.append([method, measure, kind, *vals])
    res.add_table("anomaly", ["method", "measure", "ood_kind", "auroc", "aupr_pos", "aupr_neg"], long_rows)
    res.add_table("accuracy", ["method", "accuracy"], acc_rows)
    for measure in an["measures"]:
        header = ["ood_kind"] + [f"{m}_{c}" for m in an["methods"] for c in ("roc", "pr_pos", "pr_neg")]
        rows = []
        for kind in an["ood_kinds"]:
            row = [kind]
            for m in an["methods"]:
                r = summary[m][measure][kind]
                row += [None] * 3 if r is None else [r["auroc"], r["aupr_pos"], r["aupr_neg"]]
            rows.append(row)
        res.add_table(f"wide_{measure}", header, rows)
    res.metrics["methods"] = summary

    sm = an["sweep_measure"]
    sampled = [m for m in an["methods"] if m not in POINT_METHODS]
    if an["T_sweep"]:
        rows, sweep = [], {}
        for method in sampled:
            sweep[method] = {}
            for T in an["T_sweep"]:
                reports, _ = pipe.ood_reports(method, T, [sm], stream=f"tsweep/{T}")
                sweep[method][str(T)] = _mean_auroc(reports[sm])
                rows += [[method, T, k, r["auroc"]] for k, r in reports[sm].items()]
        res.add_table("t_sweep", ["method", "T", "ood_kind", "auroc"], rows)
        res.metrics["t_sweep"] = sweep
    if an["scale_sweep"]:
        rows = []
        for method in an["methods"]:
            for factor in an["scale_sweep"]:
                reports, _ = pipe.ood_reports(method, an["T"], [sm], scale=factor)
                rows += [[method, factor, k, None if r is None else r["auroc"]] for k, r in reports[sm].items()]
        res.add_table("scale_sweep", ["method", "scale_factor", "ood_kind", "auroc"], rows)
    if an["gen_hidden_sweep"]:
        rows = []
        for h in an["gen_hidden_sweep"]:
            hidden = [h] * len(config["gan"]["hidden"])
            state = pipe.generator(hidden=hidden)
            reports, _ = pipe.ood_reports("apd", an["T"], [sm], source=state, stream=f"hsweep/{h}")
            rows += [[h, state.spec.n_params, k, r["auroc"]] for k, r in reports[sm].items()]
        res.add_table("gen_hidden_sweep", ["hidden", "generator_params", "ood_kind", "auroc"], rows)
    return res


def run_mog_sweep(config, out=None, pipe=None):
    """Mixture-of-Gaussians baselines of growing size against the SGLD set."""
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    c = config["mog"]
    res = pipe.result("mog-sweep")
    ref, _ = pipe.ood_reports("sgld", c["T"], [c["measure"]], stream="mog")
    ref_mean = _mean_auroc(ref[c["measure"]])
    rows = [["sgld", None, None, k, r["auroc"]] for k, r in ref[c["measure"]].items()]
    per_n = {}
    dim = pipe.spec.n_params
    for n_c in c["components"]:
        model = pipe.mog(n_c)
        reports, _ = pipe.ood_reports("mog", c["T"], [c["measure"]], source=model, stream=f"mog/{n_c}")
        mean = _mean_auroc(reports[c["measure"]])
        per_n[str(n_c)] = {
            "mean_auroc": mean,
            "retained": mean / ref_mean,
            "parameter_count": mog.parameter_count(n_c, dim),
            "em_iterations": len(model.trace),
            "converged": bool(model.converged),
            "reinitialized": int(model.reinitialized),
        }
        rows += [["mog", n_c, per_n[str(n_c)]["parameter_count"], k, r["auroc"]]
                 for k, r in reports[c["measure"]].items()]
    res.add_table("mog_sweep", ["method", "n_components", "parameter_count", "ood_kind", "auroc"], rows)
    res.metrics = {"measure": c["measure"], "sgld_mean_auroc": ref_mean, "mog": per_n}
    return res


def attack_source(pipe, method):
    """``(spec, params)`` of the single posterior draw an attacker is given."""
    rng = pipe.rng(f"attack/source/{method}")
    if method == "sgld":
        s = pipe.sgld()
        return pipe.spec, s.samples[rng.integers(len(s))]
    if method == "apd":
        return pipe.spec, pipe.generator().sample_params(1, rng)[0]
    if method == "mc_dropout":
        src = pipe.dropout_net()
        return nn.fold_dropout(src.spec, src.params, nn.DropoutMask.draw(src.spec, rng))
    if method == "mog":
        return pipe.spec, pipe.source("mog").sample_params(1, rng)[0]
    return pipe.spec, np.asarray(pipe.source(method), dtype=np.float64)


def run_adversarial_detection(config, out=None, pipe=None):
    """Gray-box FGSM/PGD sets from one source draw, scored by every defender."""
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    a = config["attack"]
    res = pipe.result("attack-detect")
    x_src, y_src = (pipe.data.x_val, pipe.data.y_val) if a["split"] == "val" else (pipe.data.x_test, pipe.data.y_test)
    clean = pipe.data.x_test
    rows, matrix, sets = [], {}, []
    for source in a["sources"]:
        spec, params = attack_source(pipe, source)
        for kind in a["attacks"]:
            acfg = AttackConfig(kind, a["epsilon"], a["pgd_step"], a["pgd_iterations"])
            aset = attacks.craft_attack_set(spec, params, x_src, y_src, acfg, a["count"])
            if out is not None:
                pipe._record(f"attack_{source}_{kind}", aset.save(pipe.out / "artifacts" / f"attack_{source}_{kind}"))
            sets.append([source, kind, len(aset), aset.requested, int(aset.short), float(aset.success.mean())])
            defenders = a["defenders"] if a["transfer"] else [d for d in a["defenders"] if d == source]
            for defender in defenders:
                probs = pipe.predict(defender, np.concatenate([clean, aset.adversarial]), a["T"],
                                     f"attack/defend/{defender}")
                s = pipe.scores(defender, probs, a["measure"])
                r = None if s is None else metrics.detection_report(s[:len(clean)], s[len(clean):])
                auroc = None if r is None else r["auroc"]
                matrix.setdefault(source, {}).setdefault(kind, {})[defender] = auroc
                rows.append([source, kind, defender, auroc, len(aset), len(clean)])
    res.add_table("detection", ["source", "attack", "defender", "auroc", "n_adversarial", "n_clean"], rows)
    res.add_table("attack_sets", ["source", "attack", "count", "requested", "short", "success_rate"], sets)
    res.metrics = {"matrix": matrix, "measure": a["measure"], "T": a["T"]}
    if any(row[4] for row in sets):
        res.notes.append(f"fewer than {a['count']} inputs in the {a['split']} split; sets are shorter")
    return res


def run_gan_comparison(config, out=None, pipe=None):
    """Checkpointed anomaly AUROC for each GAN loss on the same SGLD set."""
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    gc = config["gan_compare"]
    res = pipe.result("gan-compare")
    rows, summary = [], {}
    half = config["gan"]["n_steps"] / 2
    for loss in gc["variants"]:
        pipe.generator(loss, tolerate=True)
        run = pipe.gan_runs[("generator", loss, tuple(config["gan"]["hidden"]))]
        trace = run["trace"]
        late = [c["mean_auroc"] for c in trace if c["step"] > half]
        summary[loss] = {
            "status": run["status"],
            "final_auroc": trace[-1]["mean_auroc"] if trace and run["status"] == "ok" else None,
            "last_half_variance": float(np.var(late)) if late else None,
            "checkpoints": [c["step"] for c in trace],
        }
        for c in trace:
            rows += [[loss, c["step"], k, v] for k, v in c["auroc"].items()]
            rows.append([loss, c["step"], "mean", c["mean_auroc"]])
    res.add_table("gan_compare", ["loss", "step", "ood_kind", "auroc"], rows)
    res.metrics = {"variants": summary, "measure": gc["measure"]}
    return res


def initial_labeled(labels, per_class, rng):
    picks = [rng.choice(np.flatnonzero(labels == c), per_class, replace=False) for c in np.unique(labels)]
    return np.sort(np.concatenate(picks))


def acquire(scores, pool_idx, count):
    """Highest scores first; equal scores go to the lowest pool index."""
    order = np.lexsort((pool_idx, -np.asarray(scores)))
    return pool_idx[order[:count]]


def _fit_active(pipe, method, x, y, stream):
    """Posterior source for one active-learning round on the labeled rows."""
    a = pipe.config["active"]
    if method in ("sgd_dropout", "mc_dropout"):
        p = pipe.fit_point(pipe.dropout_spec, x, y, a["sgd_iterations"], stream + "/dropout")
        return p if method == "sgd_dropout" else uncertainty.DropoutSource(pipe.dropout_spec, p)
    p = pipe.fit_point(pipe.spec, x, y, a["sgd_iterations"], stream + "/sgd")
    if method == "sgd":
        return p
    section = dict(pipe.config["sampler"], burn_in=a["burn_in"], thin_interval=a["thin_interval"],
                   total_samples=a["total_samples"], batch_size=min(pipe.config["sampler"]["batch_size"], len(y)))
    s = run_chain(pipe.spec, p, x, y, _sampler(section, pipe.seed_int(stream + "/sgld")))
    if method == "sgld":
        return s
    cfg = dataclasses.replace(pipe.gan_config(), n_steps=a["gan_steps"], seed=pipe.seed_int(stream + "/gan"))
    return distill.train_offline(s, cfg)


def run_active_learning(config, out=None, pipe=None):
    """Pool-based acquisition; every round retrains from scratch."""
    pipe = pipe or Pipeline(config, out)
    config = pipe.config
    a = config["active"]
    res = pipe.result("active-learn")
    x_pool, y_pool = pipe.data.x_train, pipe.data.y_train
    start = initial_labeled(y_pool, a["initial_per_class"], pipe.rng("active/init"))
    rows, aulc = [], {}
    for method in a["methods"]:
        for acq in a["acquisitions"]:
            labeled = start.copy()
            pick_rng = pipe.rng(f"active/{method}/{acq}/random")
            curve = []
            for r in range(a["rounds"] + 1):
                stream = f"active/{method}/{acq}/{r}"
                src = _fit_active(pipe, method, x_pool[labeled], y_pool[labeled], stream)
                probs = pipe.predict(method, pipe.data.x_test, a["T"], stream + "/test", src)
                acc = metrics.accuracy(probs.mean(axis=1).argmax(axis=1), pipe.data.y_test)
                curve.append(acc)
                rows.append([method, acq, r, len(labeled), acc])
                pool_idx = np.setdiff1d(np.arange(len(y_pool)), labeled)
                if r == a["rounds"] or len(pool_idx) == 0:
                    break
                if acq == "random":
                    scores = pick_rng.random(len(pool_idx))
                else:
                    scores = uncertainty.score(pipe.predict(method, x_pool[pool_idx], a["T"], stream + "/pool", src),
                                               "entropy")
                labeled = np.sort(np.concatenate([labeled, acquire(scores, pool_idx, a["acquire"])]))
            aulc.setdefault(method, {})[acq] = float(np.mean(curve))
    res.add_table("active", ["method", "acquisition", "round", "n_labeled", "accuracy"], rows)
    res.metrics = {"aulc": aulc}
    return res


RUNNERS = {
    "toy2d": run_toy2d,
    "train-sgld": run_train_sgld,
    "distill": run_distill,
    "anomaly": run_anomaly,
    "active-learn": run_active_learning,
    "attack-detect": run_adversarial_detection,
    "gan-compare": run_gan_comparison,
    "mog-sweep": run_mog_sweep,
}


def run(kind, config, out=None):
    if kind not in RUNNERS:
        raise ConfigError(f"unknown experiment {kind!r}")
    t0 = time.perf_counter()
    res = RUNNERS[kind](config, out)
    res.timing["total_seconds"] = time.perf_counter() - t0
    if out is not None:
        res.save(out)
    return res


def plan(kind, config):
    """Human-readable steps of an experiment, computed without training."""
    d, s, g = config["data"], config["sampler"], config["gan"]
    data = "bundled 8x8 digits" if d["source"] == "digits" else f"IDX files ({d['train_images']})"
    net = f"net hidden {config['net']['hidden']} {config['net']['activation']}"
    sgld = (f"SGLD from {s['init']} init: {s['burn_in']} burn-in, keep every {s['thin_interval']}, "
            f"{s['total_samples']} samples ({s['burn_in'] + s['thin_interval'] * s['total_samples']} updates)")
    gan = f"{g['loss']} generator: {g['n_steps']} steps, batch {g['batch_size']}, hidden {g['hidden']}"
    sgd = f"SGD point estimate: {config['sgd']['n_iterations']} updates"
    steps = {
        "toy2d": [f"toy clusters, {config['toy2d']['n_per_class']} points per class, net 2-"
                  f"{'-'.join(map(str, config['toy2d']['hidden']))}-2",
                  f"SGD {config['toy2d']['sgd_iterations']} updates", sgld,
                  f"generator: {config['toy2d']['gan_steps']} steps",
                  f"entropy on a {config['toy2d']['grid_resolution']}^2 grid and a "
                  f"{config['toy2d']['ring_factor']}x-spread ring"],
        "train-sgld": [data, net, sgd, sgld],
        "distill": [data, net, sgd, sgld, f"{config['distill']['mode']} distillation", gan],
        "anomaly": [data, net, f"methods {config['anomaly']['methods']}", sgd, sgld, gan,
                    f"score with {config['anomaly']['measures']} at T={config['anomaly']['T']}",
                    f"OOD kinds {config['anomaly']['ood_kinds']} at scale {config['anomaly']['scale_factor']}",
                    f"T sweep {config['anomaly']['T_sweep']}"],
        "active-learn": [data, net, f"methods {config['active']['methods']} x {config['active']['acquisitions']}",
                         f"{config['active']['rounds']} rounds of {config['active']['acquire']} acquisitions"],
        "attack-detect": [data, net, sgd, sgld, gan,
                          f"sources {config['attack']['sources']}, attacks {config['attack']['attacks']}, "
                          f"eps {config['attack']['epsilon']}, up to {config['attack']['count']} inputs",
                          f"defenders {config['attack']['defenders']} with {config['attack']['measure']} "
                          f"at T={config['attack']['T']}"],
        "gan-compare": [data, net, sgd, sgld,
                        f"variants {config['gan_compare']['variants']}, {g['n_steps']} steps, "
                        f"checkpoint every {config['gan_compare']['checkpoint_every']}"],
        "mog-sweep": [data, net, sgd, sgld, f"EM fits with {config['mog']['components']} components",
                      f"score with {config['mog']['measure']} at T={config['mog']['T']}"],
    }
    if kind not in steps:
        raise ConfigError(f"unknown experiment {kind!r}")
    return steps[kind]
