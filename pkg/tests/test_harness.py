import json

import numpy as np
import pytest

from memcomm import cli
from memcomm import harness as H
from memcomm.evaluation import accuracy

TINY_CODEC = {"width": 8, "symbols": 8, "encoder_steps": 1, "decoder_steps": 1, "heads": 2, "memory": 10,
              "importance_width": 4, "importance_heads": 2}
TINY_PROFILE = {"semantic": {"batch": 20, "lr": 3e-3, "epochs": 2}, "jsc": {"batch": 50, "lr": 3e-3, "epochs": 1},
                "whole": {"batch": 20, "lr": 1e-3, "epochs": 1}, "importance": {"batch": 20, "lr": 1e-3, "epochs": 1},
                "consecutive": {"batch": 20, "lr": 1e-3, "epochs": 1}}


def _base(**kw):
    d = dict(generate_stories=30, codec=TINY_CODEC, profile=TINY_PROFILE)
    d.update(kw)
    return H.ExperimentConfig(**d)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = H.run_training(_base(), out, log_path=out / "log.txt")
    ckpts = {role: str(out / f"{role}.ckpt") for role in ("codec", "importance", "consecutive")}
    return out, ckpts, res


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    for bad in ({"channel": "fiber"}, {"strategy": "best"}, {"budget_source": "oracle"},
                {"csi_error": -1.0}, {"seeds": []}, {"codec": {"vocab_size": 3}}, {"profile": "huge"},
                {"checkpoints": {"mystery": "x"}}, {"link_budget": {"length": 64}}):
        with pytest.raises((H.ConfigError, ValueError)):
            H.ExperimentConfig(**bad)
    with pytest.raises(H.ConfigError, match="unknown config keys"):
        H.ExperimentConfig.from_dict({"snr": [1]})


def test_config_json_roundtrip_and_digest(tmp_path):
    cfg = _base(snr_grid=[0.0, 6.0], seeds=[1, 2])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = H.ExperimentConfig.load(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert _base(seeds=[3]).digest() != cfg.digest()
    path.write_text("{nope")
    with pytest.raises(H.ConfigError):
        H.ExperimentConfig.load(path)


# ---------------------------------------------------------------------------
# symbol accounting


def test_modulation_symbols():
    assert [H.modulation_symbols(760, b) for b in (1, 2, 3, 4)] == [760, 380, 253, 190]
    with pytest.raises(ValueError):
        H.modulation_symbols(0, 2)


def test_symbol_table_rows():
    rows = {r["method"]: [r[s] for s in H.COARSE_SNRS] for r in H.symbol_table()}
    assert rows["mem-deepsc"] == [32] * 5
    assert rows["utf8-turbo"] == [190] * 5
    dyn = rows["dynamic"]
    assert dyn[:3] == [32, 25, 18] and dyn[3] in (16, 17) and dyn[4] == 16
    assert rows["utf8-turbo-amc-awgn"] == [760, 760, 380, 253, 190]
    assert rows["utf8-turbo-amc-rician"] == [760, 760, 380, 253, 253]


def test_planner_budget_source():
    cfg = _base(budget_source="planner")
    got = [H.budget_for(cfg, s, 32) for s in H.COARSE_SNRS]
    assert got[:3] == [32, 25, 18] and abs(got[3] - 16) <= 1 and got[4] == 16


# ---------------------------------------------------------------------------
# training and evaluation


def test_training_writes_checkpoints(trained):
    out, ckpts, res = trained
    for role in ("codec", "separate", "importance", "consecutive"):
        assert (out / f"{role}.ckpt").exists()
    model = H.load_model(ckpts["codec"])
    assert model.codec.width == 8 and model.vocab.size > 2
    assert (out / "log.txt").read_text().count("\n") == len(res["log"].records)


def test_sweep_grid_accounting_and_provenance(trained, tmp_path):
    _, ckpts, _ = trained
    cfg = _base(checkpoints={"codec": ckpts["codec"]}, seeds=[0, 1])
    rows = H.run_accuracy_sweep(cfg)
    assert len(rows) == 10
    digest = H.load_model(ckpts["codec"]).digest
    assert all(r.config_hash == cfg.digest() and r.checkpoint_hash == digest for r in rows)
    path = H.write_rows(rows, tmp_path / "s.csv", H.run_manifest(cfg, "eval-sweep", {"codec": digest}))
    assert H.read_rows(path) == [H.ResultRow(**{**r.__dict__, "accuracy": round(r.accuracy, 6)}) for r in rows]
    assert json.loads((tmp_path / "s.json").read_text())["config_hash"] == cfg.digest()


def test_noiseless_row_equals_channel_free(trained):
    _, ckpts, _ = trained
    cfg = _base(checkpoints={"codec": ckpts["codec"]}, snr_grid=[None])
    (row,) = H.run_accuracy_sweep(cfg)
    m = H.load_model(ckpts["codec"])
    data = H.build_corpus(cfg, m.vocab, m.codec.memory).test
    assert row.accuracy == accuracy(m.params, m.codec, data, None)


def test_parallel_sweep_matches_serial(trained):
    _, ckpts, _ = trained
    kw = dict(checkpoints={"codec": ckpts["codec"], "importance": ckpts["importance"]}, seeds=[0, 1],
              snr_grid=[0.0, 12.0], channel="rician", csi_error=0.05, strategy="importance", budgets=[5])
    serial = H.run_accuracy_sweep(_base(**kw))
    parallel = H.run_accuracy_sweep(_base(workers=2, **kw))
    assert [r.__dict__ for r in serial] == [r.__dict__ for r in parallel]


def test_mask_comparison_rows(trained):
    _, ckpts, _ = trained
    cfg = _base(checkpoints=ckpts, snr_grid=[18.0], seeds=[0], budgets=[4, 8], half_checkpoint=ckpts["codec"])
    rows = H.run_mask_comparison(cfg)
    labels = sorted({r.strategy for r in rows})
    assert labels == ["consecutive", "importance", "none@L", "none@L/2", "random"]
    full = {r.strategy: r.accuracy for r in rows if r.budget == 8}
    assert full["importance"] == full["random"] == full["none@L"]
    assert {r.budget for r in rows if r.strategy == "random"} == {4, 8}


def test_missing_checkpoint_is_an_error():
    with pytest.raises(FileNotFoundError):
        H.run_accuracy_sweep(_base())


def test_result_row_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        H.ResultRow("none", "awgn", 0.0, 0.0, 8, 1.5, 8, 0)


# ---------------------------------------------------------------------------
# command line


def _write_cfg(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(_base(**kw).to_dict()))
    return str(path)


def test_cli_reporting_commands(tmp_path, capsys):
    assert cli.main(["plan"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "snr_db,noise_var,real_length,planned_length"
    assert [line.split(",")[-1] for line in out[1:]] == ["32", "25", "18", "17", "16"]
    assert cli.main(["symbol-table", "--out", str(tmp_path / "t.csv")]) == 0
    assert (tmp_path / "t.png").exists()
    assert "utf8-turbo,190,190,190,190,190" in (tmp_path / "t.csv").read_text()
    assert cli.main(["plan", "--snr", "3", "--out", str(tmp_path / "p.csv")]) == 0
    assert (tmp_path / "p.png").exists()
    assert cli.main(["data-inspect", "--config", _write_cfg(tmp_path)]) == 0
    assert "episodes,150" in capsys.readouterr().out


def test_cli_evaluation_commands(trained, tmp_path, capsys):
    out_dir, ckpts, _ = trained
    cfg = _write_cfg(tmp_path, checkpoints=ckpts, seeds=[0], snr_grid=[6.0, 18.0], budgets=[4])
    assert cli.main(["eval-sweep", "--config", cfg, "--out", str(tmp_path / "e.csv")]) == 0
    assert len(H.read_rows(tmp_path / "e.csv")) == 2
    assert (tmp_path / "e.png").exists() and (tmp_path / "e.json").exists()
    assert cli.main(["mask-compare", "--config", cfg, "--out", str(tmp_path / "m.csv"), "--no-plot"]) == 0
    assert len(H.read_rows(tmp_path / "m.csv")) == 2 * 4
    assert not (tmp_path / "m.png").exists()
    assert cli.main(["noise-estimate", ckpts["codec"], ckpts["consecutive"], "--config", cfg, "--probes", "20"]) == 0
    header, values = capsys.readouterr().out.strip().splitlines()[-2:]
    est = dict(zip(header.split(","), values.split(",")))
    assert int(est["probes"]) == 20 and float(est["sigma_m2"]) >= 0


def test_cli_train(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, generate_stories=10)
    assert cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / "m"), "--stages", "semantic"]) == 0
    assert (tmp_path / "m" / "codec.ckpt").exists()
    assert (tmp_path / "m" / "train_log.txt").read_text().startswith("stage=semantic epoch=1")
    assert json.loads((tmp_path / "m" / "train_manifest.json").read_text())["checkpoints"]["codec"]


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["eval-sweep", "--config", str(tmp_path / "missing.json")]) != 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"channel": "fiber"}))
    assert cli.main(["eval-sweep", "--config", str(bad)]) != 0
    assert "error" in capsys.readouterr().err
    corrupt = tmp_path / "c.ckpt"
    corrupt.write_bytes(b"MEMCKPT\0garbage")
    assert cli.main(["noise-estimate", str(corrupt), str(corrupt)]) != 0
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])


def test_make_data_roundtrip(tmp_path):
    path = tmp_path / "new" / "qa1_single-supporting-fact_train.txt"
    assert cli.main(["make-data", "--out", str(path), "--stories", "4", "--seed", "2"]) == 0
    cfg = _base(dataset=str(path.parent))
    assert len(H.load_episodes(cfg)) == 20
    cfg = _base(dataset=str(path))
    assert len(H.load_episodes(cfg)) == 20
    with pytest.raises(FileNotFoundError):
        H.load_episodes(_base(dataset=str(path.parent), tasks=[2]))
    np.testing.assert_equal(len(H.load_episodes(_base(generate_stories=4, data_seed=2))), 20)
