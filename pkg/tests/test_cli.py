import json

import pytest

from advlab import cli
from conftest import run_cli_pipeline


def test_empty_attack_block_defaults():
    cfg = cli.parse_config({"attack": {}})
    spec = cfg.attack.spec()
    assert spec.momentum == 1.0 and spec.ig_steps == 20 and spec.steps == 20
    assert spec.epsilons == (16.0,) and spec.update_sign == "descend" and spec.scalar == "logit"


def test_unknown_key_is_named():
    with pytest.raises(cli.ConfigError) as e:
        cli.parse_config({"attack": {"epsilonn": [4]}})
    assert "attack.epsilonn" in str(e.value)


@pytest.mark.parametrize(
    "raw",
    [
        {"eval": {"epsilons": [2, 1]}},
        {"eval": {"epsilons": []}},
        {"train": {"batch_size": 0}},
        {"model": {"family": "resnet"}},
        {"attack": {"update_sign": "sideways"}},
    ],
)
def test_invalid_values_rejected(raw):
    with pytest.raises(cli.ConfigError):
        cli.parse_config(raw)


def test_config_round_trip(tmp_path):
    cfg = cli.parse_config({"seed": 5, "train": {"free_at": {"replay": 3}}, "dataset": {"synth": {"texture_band": [0.2, 0.3]}}})
    again = cli.parse_config(json.dumps(cli.dump_config(cfg)))
    assert again == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cli.dump_config(cfg)))
    assert cli.parse_config(str(p)) == cfg
    assert cfg.train.build().free_at.replay == 3


def test_parse_errors():
    with pytest.raises(cli.ConfigError, match="not found"):
        cli.parse_config("/nonexistent/run.json")
    with pytest.raises(cli.ConfigError, match="JSON"):
        cli.parse_config("{not json")
    with pytest.raises(cli.ConfigError):
        cli.parse_config("[1, 2]")


def test_stage_seeds_are_distinct_and_stable():
    seeds = {k: cli.stage_seed(7, k) for k in cli.STAGES}
    assert len(set(seeds.values())) == len(seeds)
    assert seeds == {k: cli.stage_seed(7, k) for k in cli.STAGES}
    assert cli.stage_seed(8, "data") != seeds["data"]


def write_config(tmp_path, body):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(body))
    return str(p)


SMALL = {
    "model": {"family": "mlp", "input_shape": [6, 6, 1], "num_classes": 3, "hidden": [8]},
    "dataset": {"synth": {"class_count": 3, "per_class": 10, "resolution": 6}},
}


def test_eval_zero_budget_on_fresh_model(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "eval": {"epsilons": [0]}})
    assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    body = json.loads((tmp_path / "o" / "report.json").read_text())
    row = body["robustness"]["rows"][0]
    assert row["pgd"] == {"0.0": row["clean"]} and row["mig"] == {"0.0": row["clean"]}
    lines = (tmp_path / "o" / "robustness.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0] == "model,family,tag,n,clean,pgd_0,mig_0"


def test_bench_run_without_targets_fails_before_compute(tmp_path, monkeypatch):
    calls = []
    monkeypatch.setattr(cli.bench, "load_transfer_benchmark", lambda *a: calls.append(a))
    cfg = write_config(tmp_path, {**SMALL, "bench": {"benchmark": "b"}})
    assert cli.main(["bench", "run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert calls == []
    assert not (tmp_path / "o").exists()


def test_bench_build_without_surrogates(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert cli.main(["bench", "build", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_error_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "attack": {"epsilonn": [1]}})
    assert cli.main(["attack", "--config", cfg]) == 2
    assert "attack.epsilonn" in capsys.readouterr().err
    cfg = write_config(tmp_path, SMALL)
    assert cli.main(["frobnicate", "--config", cfg]) == 2
    # a missing checkpoint is a runtime error, reported with the command name
    cfg = write_config(tmp_path, {**SMALL, "eval": {"checkpoint": "missing.advz"}})
    assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "advlab eval" in capsys.readouterr().err
    assert cli.main(["eval", "--config", cfg, "--threads", "0"]) == 2


@pytest.mark.parametrize("method", ["pgd", "mig", "mig_multi", "ig"])
def test_attack_command(tmp_path, method):
    body = {**SMALL, "dataset": {**SMALL["dataset"], "limit": 4}}
    body["attack"] = {"method": method, "epsilons": [2, 4], "steps": 2, "ig_steps": 2}
    cfg = write_config(tmp_path, body)
    assert cli.main(["attack", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "attack.json").read_text())
    assert summary["n"] == 4
    if method == "ig":
        assert len(list((tmp_path / "o" / "attributions").glob("*.pgm"))) == 4
    else:
        assert [r["epsilon"] for r in summary["results"]] == [2.0, 4.0]
        for r in summary["results"]:
            assert (tmp_path / "o" / r["file"]).exists()


def test_seed_override(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "eval": {"epsilons": [0]}})
    cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "11"])
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 11


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    return root, run_cli_pipeline(root)


def test_pipeline_emits_aggregate(pipeline):
    root, files = pipeline
    for name in ("st/model.advz", "at/model.advz", "run/aggregate.csv", "run/matrix.json", "report/report.json"):
        assert name in files
    agg = files["run/aggregate.csv"].decode().splitlines()
    assert agg[0] == "surrogate_tag,AT,ST" and len(agg) == 3
    run = json.loads(files["at/run.json"])
    assert run["tag"] == "AT"
    manifest = json.loads(files["build/manifest.json"])
    assert set(manifest) == {"version", "command", "seed", "stage_seeds", "config"}
    assert str(root) not in files["build/manifest.json"].decode()
    # the report command rebuilds the same aggregate from matrix.json
    assert files["report/aggregate.csv"] == files["run/aggregate.csv"]
