"""Acceptance checks, one printed PASS/FAIL line each.

The digits-scale checks share one pipeline so the SGD fit, the SGLD set and
the gradient-penalty generator are trained once. A check's reported runtime
is its own wall time plus the build time of every shared model it consumes,
so the number is what a cold run of that check alone would cost.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from apd import distill, experiments, metrics, mog, nn, uncertainty as U
from apd.distill import GanConfig
from apd.nn import NetSpec
from apd.sgld import SamplerConfig, chain_rng, run_chain, sample_posterior

from test_metrics import brute_aupr, brute_auroc, random_instance as metric_instance
from test_nn import central_fd, random_instance as net_instance, rel_err
from test_uncertainty import direct_bald, direct_entropy, direct_model_variance, direct_vr, random_batch


@pytest.fixture
def verdict(capsys):
    """Print one summary line (bypassing capture) and fail the test if needed."""

    def report(number, ok, detail, seconds, budget=None):
        in_budget = budget is None or seconds < budget
        status = "PASS" if ok and in_budget else "FAIL"
        limit = f" (budget {budget:.0f}s)" if budget is not None else ""
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {status}  {detail}  runtime {seconds:.1f}s{limit}")
        assert ok, detail
        assert in_budget, f"runtime {seconds:.1f}s over the {budget}s budget"

    return report


class Clock:
    """Wall time of a check plus the first-build time of the shared models it used."""

    def __init__(self, pipe):
        self.pipe = pipe
        self.before = dict(pipe.timing)
        self.t0 = time.perf_counter()

    def seconds(self, *keys):
        own = time.perf_counter() - self.t0
        return own + sum(self.before.get(str(k), 0.0) for k in keys)


@pytest.fixture(scope="session")
def desk():
    cfg = experiments.make_config(overrides={
        "anomaly": {"methods": ["sgd", "sgld", "apd"], "measures": ["vr"], "T_sweep": [10, 50, 200]},
        "attack": {"sources": ["sgld", "apd"], "defenders": ["sgld", "apd"]},
    })
    return experiments.Pipeline(cfg)


def gan_key(pipe, loss):
    return ("generator", loss, tuple(pipe.config["gan"]["hidden"]))


@pytest.fixture(scope="session")
def anomaly(desk):
    clock = Clock(desk)
    res = experiments.run_anomaly(desk.config, pipe=desk)
    return res, clock.seconds("sgd", "sgld", gan_key(desk, "wgan_gp"))


BASE = ("sgd", "sgld")


class TestAcceptance:
    def test_01_gradients(self, verdict):
        t0 = time.perf_counter()
        worst_p = worst_x = worst_pen = 0.0
        for seed in range(20):
            act = ("tanh", "leaky_relu", "relu")[seed % 3]
            spec, p, x, y = net_instance(seed, act)
            assert spec.n_params <= 500
            _, g = nn.loss_and_grad(spec, p, x, y, 0.3, 1.7)
            fd = central_fd(lambda q: nn.loss_and_grad(spec, q, x, y, 0.3, 1.7)[0], p, 1e-6)
            worst_p = max(worst_p, rel_err(g, fd))
            gx = nn.grad_input(spec, p, x, y)
            fdx = central_fd(lambda v: nn.loss_and_grad(spec, p, v, y)[0], x, 1e-6)
            worst_x = max(worst_x, rel_err(gx, fdx))

            # the penalty needs a smooth critic for its second derivative
            rng = np.random.default_rng(100 + seed)
            critic = NetSpec((spec.layer_sizes[0], *spec.layer_sizes[1:-1], 1), ("tanh", "leaky_relu")[seed % 2], 0.2)
            cp = rng.normal(scale=0.7, size=critic.n_params)
            x_hat = rng.normal(size=(4, critic.layer_sizes[0]))
            _, gpen = nn.grad_param_of_input_grad_norm(critic, cp, x_hat)
            fdp = central_fd(lambda q: nn.grad_param_of_input_grad_norm(critic, q, x_hat)[0], cp, 1e-6)
            worst_pen = max(worst_pen, rel_err(gpen, fdp))
        ok = worst_p < 1e-5 and worst_x < 1e-5 and worst_pen < 1e-4
        verdict(1, ok, f"max rel err params {worst_p:.1e}, inputs {worst_x:.1e}, penalty {worst_pen:.1e}",
                time.perf_counter() - t0, 60)

    def test_02_sgld_conjugate_gaussian(self, verdict):
        t0 = time.perf_counter()
        prior, noise_sd = 1.0, 1.0
        data = np.random.default_rng(0).normal(1.5, noise_sd, size=100)
        post_prec = prior + len(data) / noise_sd**2
        mu, var = data.sum() / noise_sd**2 / post_prec, 1.0 / post_prec

        def grad(theta, idx, scale, rng):
            return prior * theta + scale * np.array([(theta[0] - data[idx]).sum() / noise_sd**2])

        cfg = SamplerConfig(step_size=1e-4, burn_in=2000, thin_interval=50, total_samples=10_000,
                            batch_size=10, dataset_size=len(data), prior_precision=prior).resolved(len(data))
        kept, _ = sample_posterior(grad, np.zeros(1), len(data), cfg, chain_rng(0, 0))
        draws = np.array(kept)[:, 0]
        batch = np.array([b.mean() for b in np.array_split(draws, 50)])
        se = batch.std(ddof=1) / np.sqrt(50)
        z = abs(draws.mean() - mu) / se
        var_err = abs(draws.var() - var) / var
        verdict(2, len(draws) == 10_000 and z < 3 and var_err < 0.2,
                f"mean off by {z:.2f} SE, variance off by {100 * var_err:.1f}%", time.perf_counter() - t0, 60)

    def test_03_toy2d(self, verdict):
        t0 = time.perf_counter()
        res = experiments.run("toy2d", experiments.make_config())
        m = res.metrics
        ratios = m["far_ratio_vs_sgd"]
        ok = (m["ring_radius"] >= 5 * m["data_spread"] and all(r is not None and r > 5 for r in ratios.values())
              and all(e < 0.2 for e in m["near_entropy"].values()))
        near = ", ".join(f"{k} {v:.3f}" for k, v in m["near_entropy"].items())
        verdict(3, ok, f"far/SGD ratio sgld {ratios['sgld']:.1f}, apd {ratios['apd']:.1f}; near entropy {near}",
                time.perf_counter() - t0, 300)

    def test_04_anomaly_ordering(self, anomaly, verdict):
        res, seconds = anomaly
        vr = {m: res.metrics["methods"][m]["vr"] for m in ("sgd", "sgld", "apd")}
        ok, parts = True, []
        for k in res.config["anomaly"]["ood_kinds"]:
            sgd, sgld, apd = (vr[m][k]["auroc"] for m in ("sgd", "sgld", "apd"))
            ok &= sgld >= sgd + 0.05 and apd >= 0.95 * sgld
            parts.append(f"{k}: sgd {sgd:.3f} sgld {sgld:.3f} apd {apd:.3f}")
        verdict(4, ok, "; ".join(parts), seconds, 1200)

    def test_05_mog_sweep(self, desk, verdict):
        clock = Clock(desk)
        res = experiments.run_mog_sweep(desk.config, pipe=desk)
        seconds = clock.seconds(*BASE)
        per = res.metrics["mog"]
        ref = res.metrics["sgld_mean_auroc"]
        a1, a60 = per["1"]["mean_auroc"], per["60"]["mean_auroc"]
        count = mog.parameter_count(60, 79_510)
        ok = a60 >= a1 + 0.03 and a60 >= 0.97 * ref and count == 9_541_260
        curve = ", ".join(f"{n}: {v['mean_auroc']:.3f}" for n, v in per.items())
        verdict(5, ok, f"entropy AUROC by N_c {{{curve}}}, sgld {ref:.3f}, ratio {a60 / ref:.3f}; "
                       f"parameter_count(60, 79510) = {count}", seconds, 1800)

    def test_06_sample_size(self, anomaly, verdict):
        res, seconds = anomaly
        rows = res.tables["t_sweep"]["rows"]
        ok, parts = True, []
        for method in ("sgld", "apd"):
            for k in res.config["anomaly"]["ood_kinds"]:
                curve = [r[3] for r in rows if r[0] == method and r[2] == k]
                ok &= all(b >= a - 0.01 for a, b in zip(curve, curve[1:]))
                parts.append(f"{method}/{k} {' '.join(f'{v:.3f}' for v in curve)}")
        T = res.config["anomaly"]["T_sweep"]
        verdict(6, ok, f"AUROC at T={T}: " + "; ".join(parts), seconds, 600)

    def test_07_metric_oracles(self, verdict):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        mismatches = 0
        for _ in range(1000):
            s, l = metric_instance(rng)
            mismatches += metrics.auroc(s, l) != brute_auroc(s, l)
            mismatches += metrics.aupr(s, l) != pytest.approx(brute_aupr(s, l), rel=1e-12, abs=1e-15)
        verdict(7, mismatches == 0, f"{mismatches} mismatches over 1000 instances", time.perf_counter() - t0, 60)

    def test_08_uncertainty_oracles(self, verdict):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst, bald_over, vr_bad, cov_worst = 0.0, 0, 0, 0.0
        for _ in range(1000):
            p = random_batch(rng)
            rows = p.tolist()
            mean = U.predictive_mean(p)
            ent = U.entropy(mean)
            worst = max(worst, abs(ent - direct_entropy(mean.tolist())),
                        abs(U.bald(p) - max(direct_bald(rows), 0.0)),
                        abs(U.model_variance(p) - max(direct_model_variance(rows), 0.0)))
            vr_bad += U.variation_ratio(p) != direct_vr(rows)
            bald_over += U.bald(p) > ent
            trace = np.trace(np.atleast_2d(np.cov(p, rowvar=False, bias=True))) if len(p) > 1 else 0.0
            cov_worst = max(cov_worst, abs(U.model_variance(p) - trace))
        ok = worst < 1e-12 and vr_bad == 0 and bald_over == 0 and cov_worst < 1e-12
        verdict(8, ok, f"max abs err {worst:.1e}, vr mismatches {vr_bad}, bald > entropy {bald_over}, "
                       f"covariance trace err {cov_worst:.1e}", time.perf_counter() - t0, 60)

    def test_09_adversarial_detection(self, desk, verdict):
        clock = Clock(desk)
        res = experiments.run_adversarial_detection(desk.config, pipe=desk)
        seconds = clock.seconds(*BASE, gan_key(desk, "wgan_gp"))
        m = res.metrics["matrix"]
        ok, parts = True, []
        for attack in ("fgsm", "pgd"):
            for defender in ("sgld", "apd"):
                v = m["sgld"][attack][defender]
                ok &= v >= 0.70
                parts.append(f"sgld->{defender} {attack} {v:.3f}")
            for source in ("sgld", "apd"):
                v = m[source][attack][source]
                ok &= v >= 0.65
                parts.append(f"self {source} {attack} {v:.3f}")
        n = {r[0] + "/" + r[1]: r[2] for r in res.tables["attack_sets"]["rows"]}
        verdict(9, ok, "; ".join(parts) + f"; set sizes {n}", seconds, 1200)

    def test_10_gan_comparison(self, desk, verdict):
        clock = Clock(desk)
        res = experiments.run_gan_comparison(desk.config, pipe=desk)
        seconds = clock.seconds(*BASE, *(gan_key(desk, v) for v in desk.config["gan_compare"]["variants"]))
        v = res.metrics["variants"]
        gp = v["wgan_gp"]
        others = [v["wgan_clip"], v["vanilla"]]
        ok = (gp["final_auroc"] is not None
              and all(o["final_auroc"] is None or gp["final_auroc"] >= o["final_auroc"] for o in others)
              and v["vanilla"]["last_half_variance"] is not None
              and gp["last_half_variance"] <= v["vanilla"]["last_half_variance"])
        detail = "; ".join(
            f"{k} final {'-' if r['final_auroc'] is None else format(r['final_auroc'], '.3f')} "
            f"var {'-' if r['last_half_variance'] is None else format(r['last_half_variance'], '.1e')} ({r['status']})"
            for k, r in v.items())
        verdict(10, ok, detail, seconds, 1800)

    def test_11_online_matches_offline(self, verdict):
        t0 = time.perf_counter()
        pipe = experiments.Pipeline(experiments.make_config(overrides={"sgd": {"n_iterations": 200}}))
        spec, data = pipe.spec, pipe.data
        init = pipe.sgd()
        scfg = SamplerConfig(burn_in=50, thin_interval=2, total_samples=150, batch_size=100, seed=11)
        gcfg = GanConfig(latent_dim=8, hidden=(32, 32), n_steps=20, seed=12)
        offline_set = run_chain(spec, init, data.x_train, data.y_train, scfg)
        offline = distill.train_offline(offline_set, gcfg)
        online = distill.train_online(spec, data.x_train, data.y_train, scfg, gcfg, n_chains=1,
                                      t_mcmc=scfg.resolved(len(data.y_train)).n_iterations, t_gan=gcfg.n_steps,
                                      n_rounds=1, capacity=None, inits=[init]).state
        a = distill.sample(offline, 100, np.random.default_rng(5))
        b = distill.sample(online, 100, np.random.default_rng(5))
        same = a.samples.tobytes() == b.samples.tobytes()
        verdict(11, same, f"first 100 generated vectors {'identical' if same else 'differ'} "
                          f"({a.samples.shape[1]} coordinates)", time.perf_counter() - t0)

    def test_12_mnist_spot_check(self, verdict, capsys):
        root = os.environ.get("APD_MNIST_DIR")
        names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                 "t10k-labels-idx1-ubyte"]
        paths = [self._find(Path(root), n) for n in names] if root else [None]
        if None in paths:
            with capsys.disabled():
                print("\n[criterion 12] SKIP  set APD_MNIST_DIR to a folder with the four MNIST IDX files")
            pytest.skip("optional MNIST spot check needs IDX files")
        t0 = time.perf_counter()
        cfg = experiments.make_config("full", {"data": dict(zip(
            ["train_images", "train_labels", "test_images", "test_labels"], map(str, paths)))})
        pipe = experiments.Pipeline(cfg)
        p = pipe.sgd()
        acc = metrics.accuracy(nn.forward(pipe.spec, p, pipe.data.x_test).argmax(axis=1), pipe.data.y_test)
        verdict(12, abs(acc - 0.981) <= 0.005, f"784-100-10 SGD test accuracy {acc:.4f} (target 0.981 +- 0.005)",
                time.perf_counter() - t0)

    @staticmethod
    def _find(root, name):
        for cand in (root / name, root / (name + ".gz")):
            if cand.exists():
                return cand
        return None
