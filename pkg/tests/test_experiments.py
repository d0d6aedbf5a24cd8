import json

import numpy as np
import pytest

from apd import distill, experiments, io
from apd.errors import ConfigError, GanDivergenceError
from apd.experiments import ExperimentResult, Pipeline, Splits


def config(overrides, **extra):
    for key, value in extra.items():
        overrides.setdefault(key, {}).update(value)
    return experiments.make_config(overrides=overrides)


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            experiments.make_config(overrides={"bogus": 1})
        with pytest.raises(ConfigError, match="sampler.warp"):
            experiments.make_config(overrides={"sampler": {"warp": 3}})
        with pytest.raises(ConfigError):
            experiments.make_config(overrides={"sampler": 5})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            experiments.make_config(overrides={"anomaly": {"methods": ["sgld", "oracle"]}})
        with pytest.raises(ConfigError):
            experiments.make_config(overrides={"gan": {"gp_lambda": -1}})
        with pytest.raises(ConfigError):
            experiments.make_config(overrides={"attack": {"pgd_step": 1.0}})
        with pytest.raises(ConfigError):
            experiments.make_config("huge")

    def test_profiles_and_seed(self):
        desk = experiments.make_config(seed=9)
        full = experiments.make_config("full")
        assert desk["seed"] == 9 and desk["data"]["source"] == "digits"
        assert full["data"]["source"] == "idx" and full["attack"]["T"] == 1000
        assert desk["anomaly"]["T"] == 200 and desk["sampler"]["total_samples"] == 2000
        assert desk["attack"]["count"] == 600

    def test_file_profile_and_flag_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"profile": "full", "seed": 4, "gan": {"n_steps": 3}}))
        cfg = experiments.load_config(path)
        assert cfg["data"]["source"] == "idx" and cfg["seed"] == 4 and cfg["gan"]["n_steps"] == 3
        assert experiments.load_config(path, profile="desk")["data"]["source"] == "digits"
        assert experiments.load_config(path, seed=1)["seed"] == 1

    def test_t_sweep_has_reference_points(self):
        assert {50, 100} <= set(experiments.make_config()["anomaly"]["T_sweep"])

    def test_defaults_are_not_shared(self):
        cfg = experiments.make_config()
        cfg["sampler"]["burn_in"] = -5
        assert experiments.make_config()["sampler"]["burn_in"] == 500


class TestStreams:
    def test_named_streams(self):
        a = Pipeline(experiments.make_config(seed=3))
        b = Pipeline(experiments.make_config(seed=3))
        assert a.rng("x").random() == b.rng("x").random()
        assert a.rng("x").random() != a.rng("y").random()
        assert a.seed_int("gan/wgan_gp") != Pipeline(experiments.make_config(seed=4)).seed_int("gan/wgan_gp")


class TestActiveHelpers:
    def test_acquire_ties_to_lowest_index(self):
        picked = experiments.acquire([0.5, 0.9, 0.9, 0.1], np.array([3, 7, 5, 9]), 2)
        assert picked.tolist() == [5, 7]

    def test_initial_two_per_class(self):
        labels = np.repeat(np.arange(10), 30)
        idx = experiments.initial_labeled(labels, 2, np.random.default_rng(0))
        assert len(idx) == 20 and np.all(np.bincount(labels[idx]) == 2)


class TestResult:
    def test_round_trip(self, tmp_path):
        res = ExperimentResult("anomaly", {"seed": 1}, {"a": {"b": 0.1}})
        res.add_table("t", ["name", "n", "value", "missing"], [["x", 3, 1 / 3, None], ["y", 4, 0.25, 2.5]])
        res.timing["total_seconds"] = 1.5
        res.save(tmp_path)
        back = ExperimentResult.load(tmp_path)
        assert back == res
        lines = (tmp_path / "tables" / "t.csv").read_text().splitlines()
        assert lines[0] == "name,n,value,missing" and lines[1] == f"x,3,{1 / 3!r},-"
        assert "total_seconds" not in (tmp_path / "result.json").read_text()


@pytest.fixture(scope="module")
def anomaly_runs(tmp_path_factory):
    from conftest import TINY

    cfg = config(json.loads(json.dumps(TINY)))
    dirs = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    results = [experiments.run("anomaly", cfg, d) for d in dirs]
    return cfg, dirs, results


class TestAnomaly:
    def test_rerun_is_identical(self, anomaly_runs):
        _, dirs, _ = anomaly_runs
        files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
        assert files
        for rel in files:
            if rel.name == "timing.json":
                continue
            assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes(), rel

    def test_wide_table_layout(self, anomaly_runs):
        cfg, _, (res, _) = anomaly_runs
        t = res.tables["wide_vr"]
        methods = cfg["anomaly"]["methods"]
        assert [r[0] for r in t["rows"]] == cfg["anomaly"]["ood_kinds"]
        assert t["header"][1:4] == [f"{methods[0]}_roc", f"{methods[0]}_pr_pos", f"{methods[0]}_pr_neg"]
        assert len(t["header"]) == 1 + 3 * len(methods)
        # a point estimate has no sample spread for BALD
        assert res.tables["wide_bald"]["rows"][0][1:4] == [None] * 3

    def test_artifact_hashes(self, anomaly_runs):
        _, dirs, (res, _) = anomaly_runs
        assert {"sgd", "sgld", "dropout"} <= set(res.artifacts)
        for entry in res.artifacts.values():
            assert io.file_sha256(dirs[0] / entry["path"]) == entry["sha256"]

    def test_t_sweep(self, anomaly_runs):
        _, _, (res, _) = anomaly_runs
        assert set(res.metrics["t_sweep"]) == {"mc_dropout", "sgld", "apd"}
        assert set(res.metrics["t_sweep"]["sgld"]) == {"5", "10"}


class TestExperiments:
    def test_toy2d_grid(self, tiny):
        res = experiments.run("toy2d", config(tiny))
        assert len(res.tables["grid"]["rows"]) == 3 * 7 * 7
        assert res.metrics["ring_radius"] == pytest.approx(5 * res.metrics["data_spread"])

    def test_mog_sweep(self, tiny):
        res = experiments.run("mog-sweep", config(tiny))
        assert set(res.metrics["mog"]) == {"1", "2"}
        assert res.metrics["mog"]["2"]["parameter_count"] == 2 * (2 * 7510 + 1)

    @pytest.mark.parametrize("transfer", [True, False])
    def test_attack_matrix(self, tiny, transfer):
        res = experiments.run("attack-detect", config(tiny, attack={"transfer": transfer}))
        m = res.metrics["matrix"]
        assert sorted(m) == ["apd", "mc_dropout", "sgld"]
        for source, by_attack in m.items():
            assert sorted(by_attack) == ["fgsm", "pgd"]
            for defenders in by_attack.values():
                assert source in defenders
                assert len(defenders) == (3 if transfer else 1)

    def test_attack_count_is_capped_by_split(self, tiny):
        res = experiments.run("attack-detect", config(tiny, attack={"count": 600, "sources": ["sgld"],
                                                                   "defenders": ["sgld"], "attacks": ["fgsm"]}))
        (row,) = res.tables["attack_sets"]["rows"]
        assert row[2] == 359 and row[4] == 1 and res.notes

    def test_gan_compare_traces(self, tiny):
        res = experiments.run("gan-compare", config(tiny))
        variants = res.metrics["variants"]
        assert sorted(variants) == ["vanilla", "wgan_clip", "wgan_gp"]
        assert all(v["checkpoints"] == [3, 6] for v in variants.values())

    def test_gan_divergence_is_recorded(self, tiny, monkeypatch):
        real = distill.generator_loss_and_grad

        def flaky(gen_spec, gen_params, critic_spec, critic_params, z, cfg):
            if cfg.loss == "vanilla":
                raise GanDivergenceError("boom")
            return real(gen_spec, gen_params, critic_spec, critic_params, z, cfg)

        monkeypatch.setattr(distill, "generator_loss_and_grad", flaky)
        res = experiments.run("gan-compare", config(tiny))
        v = res.metrics["variants"]
        assert v["vanilla"]["status"] == "diverged at step 1" and v["vanilla"]["final_auroc"] is None
        assert v["wgan_gp"]["status"] == "ok"

    def test_active_learning_bookkeeping(self, tiny):
        res = experiments.run("active-learn", config(tiny))
        rows = res.tables["active"]["rows"]
        assert [r[3] for r in rows if r[1] == "entropy"] == [20, 30, 40]
        again = experiments.run("active-learn", config(tiny))
        assert again.tables["active"] == res.tables["active"]

    def test_active_learning_pool_exhaustion(self, tiny, monkeypatch):
        rng = np.random.default_rng(0)
        x = rng.random((26, 64))
        y = np.r_[np.repeat(np.arange(10), 2), np.arange(6)]
        small = Splits(x, y, x[:5], y[:5], x[:10], y[:10], 10)
        monkeypatch.setattr(experiments, "load_data", lambda cfg: small)
        res = experiments.run("active-learn", config(tiny, active={"rounds": 5}))
        sizes = [r[3] for r in res.tables["active"]["rows"] if r[1] == "random"]
        assert sizes == [20, 26]

    def test_distill_online(self, tiny):
        res = experiments.run("distill", config(tiny, distill={"mode": "online", "chains": 2, "t_mcmc": 4,
                                                                 "t_gan": 2, "rounds": 3}))
        assert res.metrics["steps"] == 4  # no GAN steps while the buffer is still empty
        assert res.metrics["inserted_per_round"] == [0, 4, 4]

    def test_train_sgld(self, tiny, tmp_path):
        res = experiments.run("train-sgld", config(tiny), tmp_path)
        assert res.metrics["n_samples"] == 30
        assert (tmp_path / "artifacts" / "sgld.bin").exists()

    @pytest.mark.parametrize("kind", experiments.EXPERIMENTS)
    def test_plan(self, kind):
        steps = experiments.plan(kind, experiments.make_config())
        assert steps and all(isinstance(s, str) for s in steps)
