import csv
import json
from pathlib import Path

import pytest

from fedsim import experiment
from fedsim.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "dataset": {"m": 300, "d": 4, "separation": 3.0},
    "model": {"hidden_widths": [6], "learning_rate": 0.01},
    "federation": {"n_clients": 3, "max_rounds": 3, "patience": 2},
    "seeds": {"master": 7, "repeats": 2},
}


def small(scenario, **sections):
    raw = json.loads(json.dumps(SMALL))
    raw["scenario"] = scenario
    for key, value in sections.items():
        raw.setdefault(key, {}).update(value)
    return experiment.config_from_dict(raw)


def strip(rec):
    return {k: v for k, v in rec.items() if k != "point"}


class TestConfig:
    def test_defaults(self):
        c = experiment.config_from_dict({"scenario": "train", "dataset": {"kind": "synthetic"}})
        fed = c.federation
        assert (fed.n_clients, fed.num_epochs, fed.patience, fed.max_rounds, fed.mode) == (6, 1, 10, 300, "proposed")
        assert fed.n_clients_sweep == (2, 4, 6, 8, 16, 32, 64)
        assert c.fault.dropout_rates == (0.0, 0.1, 0.2, 0.3, 0.5)
        assert c.master_seed == 42 and c.repeats == 1

    def test_compare_defaults_to_twenty_repeats(self):
        assert experiment.config_from_dict({"scenario": "compare"}).repeats == 20

    @pytest.mark.parametrize("raw,key", [
        ({"scenario": "train", "fault": {"dropout_rate": 1.5}}, "fault.dropout_rate"),
        ({"scenario": "train", "foo": 1}, "foo"),
        ({"scenario": "train", "federation": {"n_clients": 0}}, "federation.n_clients"),
        ({"scenario": "train", "federation": {"patiense": 3}}, "federation.patiense"),
        ({"scenario": "sweep"}, "scenario"),
        ({}, "<root>"),
        ({"scenario": "train", "fault": {"dropout_rates": [0.1, 2]}}, "fault.dropout_rates.1"),
        ({"scenario": "train", "dataset": {"kind": "csv"}}, "dataset.path"),
        ({"scenario": "train", "model": "huge"}, "model.preset"),
        ({"scenario": "train", "fault": {"t_w": 0}}, "fault.t_w"),
    ])
    def test_rejected(self, raw, key):
        with pytest.raises(ConfigurationError) as info:
            experiment.config_from_dict(raw)
        assert info.value.key == key

    def test_round_trip(self):
        c = small("dropout_sweep", fault={"weibull": {"lambda": 2.0, "k": 1.5}, "dropout_rates": [0, 0.2]},
                  model={"dropout_rates": [0.1]})
        assert experiment.config_from_dict(c.to_json()) == c
        assert experiment.config_from_dict(json.loads(json.dumps(c.to_json()))) == c

    def test_digest(self):
        c = small("train")
        assert c.digest() == small("train").digest()
        assert c.with_output("/elsewhere").digest() == c.digest()
        assert c.with_seed(8).digest() != c.digest()

    def test_parse_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"scenario": "train"}))
        assert experiment.parse_config(path).scenario == "train"
        with pytest.raises(ConfigurationError):
            experiment.parse_config(tmp_path / "missing.json")
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            experiment.parse_config(path)

    def test_shipped_configs_parse(self):
        paths = sorted(CONFIGS.glob("*.json"))
        assert paths
        for path in paths:
            experiment.parse_config(path)


class TestScenarios:
    def test_train_records(self):
        res = experiment.run_scenario(small("train", seeds={"repeats": 3}))
        assert len(res.records) == 3
        seeds = [r["seed"] for r in res.records]
        assert seeds == sorted(seeds) and len(set(seeds)) == 3
        assert len(res.curves) == sum(r["rounds"] for r in res.records)

    def test_dropout_zero_equals_train(self):
        train = experiment.run_scenario(small("train"))
        sweep = experiment.run_scenario(small("dropout_sweep", fault={"dropout_rates": [0.0, 0.3]}))
        at_zero = [strip(r) for r in sweep.records if r["point"]["dropout_rate"] == 0.0]
        assert at_zero == [strip(r) for r in train.records]
        assert len(sweep.records) == 4

    def test_scalability_one_record_per_point(self):
        res = experiment.run_scenario(small("scalability_sweep", federation={"n_clients_sweep": [2, 8]},
                                            seeds={"repeats": 1}))
        assert [r["point"] for r in res.records] == [{"n_clients": 2}, {"n_clients": 8}]

    def test_identical_arms(self):
        c = small("compare", compare={"a": "proposed", "b": "proposed"}, seeds={"repeats": 5})
        res = experiment.run_scenario(c)
        a = [r["final_auc"] for r in res.records if r["point"]["arm"] == "a"]
        b = [r["final_auc"] for r in res.records if r["point"]["arm"] == "b"]
        assert a == b
        assert res.comparison.mwu.p_value >= 0.5

    def test_deterministic(self):
        c = small("dropout_sweep", fault={"dropout_rates": [0.5]})
        a, b = experiment.run_scenario(c), experiment.run_scenario(c)
        assert a.records == b.records and a.curves == b.curves

    def test_summary(self):
        res = experiment.run_scenario(small("train"))
        (row,) = res.summary()
        assert row["runs"] == 2 and row["point"] == "mode=proposed"

    def test_interrupted_keeps_partial(self, monkeypatch):
        calls = []
        real = experiment.run_one

        def flaky(*args):
            calls.append(1)
            if len(calls) == 2:
                raise RuntimeError("boom")
            return real(*args)

        monkeypatch.setattr(experiment, "run_one", flaky)
        with pytest.raises(experiment.ScenarioInterrupted) as info:
            experiment.run_scenario(small("train"))
        assert info.value.partial.partial and len(info.value.partial.records) == 1


@pytest.fixture(scope="module")
def result():
    return experiment.run_scenario(small("compare", seeds={"repeats": 5}, fault={"dropout_rate": 0.3}))


class TestEmit:
    def test_files(self, result, tmp_path):
        experiment.emit_results(result, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"runs.jsonl", "summary.csv", "curves.csv", "failures.csv", "config.json",
                "compare.json", "manifest.json"} <= names
        lines = (tmp_path / "runs.jsonl").read_text().splitlines()
        assert len(lines) == 10
        with (tmp_path / "curves.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == sum(json.loads(line)["rounds"] for line in lines)
        assert list(rows[0])[:5] == ["round", "loss", "accuracy", "method", "seed"]
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config_digest"] == result.config.digest()
        assert not manifest["partial"] and manifest["runs"] == 10
        cmp = json.loads((tmp_path / "compare.json").read_text())
        assert set(cmp) >= {"mwu", "ks", "table"}
        config = experiment.config_from_dict(json.loads((tmp_path / "config.json").read_text()))
        assert config == result.config

    def test_overwrite_is_stable(self, result, tmp_path):
        experiment.emit_results(result, tmp_path)
        first = (tmp_path / "runs.jsonl").read_bytes()
        digest = json.loads((tmp_path / "manifest.json").read_text())["config_digest"]
        experiment.emit_results(result, tmp_path)
        assert (tmp_path / "runs.jsonl").read_bytes() == first
        assert json.loads((tmp_path / "manifest.json").read_text())["config_digest"] == digest
        assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]

    def test_io_error_flagged(self, result, tmp_path, monkeypatch):
        real = experiment._atomic_write

        def failing(path, text):
            if path.name == "curves.csv":
                raise OSError("disk full")
            return real(path, text)

        monkeypatch.setattr(experiment, "_atomic_write", failing)
        with pytest.raises(OSError, match="curves.csv"):
            experiment.emit_results(result, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["partial"] and "disk full" in manifest["error"]

    def test_output_dir_precedence(self, monkeypatch, tmp_path):
        c = small("train").with_output(tmp_path / "cfg")
        monkeypatch.delenv(experiment.OUT_ENV, raising=False)
        assert experiment.output_dir(c) == tmp_path / "cfg"
        monkeypatch.setenv(experiment.OUT_ENV, str(tmp_path / "env"))
        assert experiment.output_dir(c) == tmp_path / "env"
        assert experiment.output_dir(c, tmp_path / "flag") == tmp_path / "flag"
