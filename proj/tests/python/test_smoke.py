import json

import pytest

import metaforge


def test_worked_example_rendering():
    enc = metaforge.encode("SSGGSSILDRAVIEHNLLSAS", "R10A", max_len=64)
    assert enc["rendered"].replace(" [PAD]", "") == "[CLS] SSGGSSILD [SEP] R [SEP] A [SEP] AVIEHNLLSAS"
    assert len(enc["ids"]) == 64
    assert sum(enc["mask"]) == 26


def test_standard_mode_has_unknown_tokens():
    enc = metaforge.encode("SSGGSSILDRAVIEHNLLSAS", "R10A", mode="standard", max_len=30)
    assert enc["tokens"].count("[UNK]") == 2


def test_errors_map_to_python_exceptions():
    with pytest.raises(metaforge.ValidationError):
        metaforge.encode("SSGGSSILDRAVIEHNLLSAS", "K10A")
    with pytest.raises(metaforge.ParseError):
        metaforge.encode("ACDE", "garbage")
    with pytest.raises(metaforge.ContractViolation):
        metaforge.nmse([1.0, 1.0], [2.0, 2.0])
    assert issubclass(metaforge.DataError, metaforge.MetaforgeError)


def test_nmse_constant_mean_is_one():
    truth = [1.0, 2.0, 4.0, 7.0]
    assert metaforge.nmse([3.5] * 4, truth) == 1.0
    assert metaforge.nmse(truth, truth) == 0.0


def test_default_config_matches_training_table():
    maml = metaforge.default_config()["maml"]
    assert maml["inner_lr"] == 0.01
    assert maml["meta_lr"] == 0.001
    assert maml["support_size"] == 8 and maml["query_size"] == 8
    assert maml["meta_batch"] == 4
    assert maml["epochs"] == 50
    assert maml["inner_steps"] == 5
    assert maml["inner_optimizer"] == "adam"


SMALL = {
    "net": {"d_model": 16, "n_heads": 2, "n_layers": 1, "ff_dim": 16, "max_len": 40},
    "maml": {"epochs": 2},
    "finetune": {"epochs": 1},
    "trials": 2,
}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mf")
    code, _, err = metaforge.cli("synth", "--out", root / "raw", "--tasks", "3", "--records", "40", "--seed", "7")
    assert code == 0, err
    raw = [root / "raw" / f"syn{i}.csv" for i in range(3)]
    code, out, err = metaforge.cli("ingest", "--input", *raw, "--out", root / "data", "--seed", "1")
    assert code == 0, err
    assert out.startswith("task\taccepted")
    return root / "data"


def test_protocols_return_reports(data_dir):
    cross = metaforge.run_cross_task(data_dir, "syn2", SMALL)
    assert cross["protocol"] == "cross_task"
    assert "syn2" not in cross["training_tasks"]
    assert len(cross["trial_nmse"]) == 2

    pooled = metaforge.run_pooled(data_dir, SMALL)
    assert sorted(r["target_task"] for r in pooled) == ["syn0", "syn1", "syn2"]

    ft = metaforge.run_finetune(data_dir, "syn1", config=SMALL)
    assert ft["protocol"] == "finetune"


def test_unknown_config_key_is_rejected(data_dir):
    with pytest.raises(metaforge.ValidationError):
        metaforge.run_pooled(data_dir, {"bogus": 1})


def test_cli_train_and_eval(data_dir, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(SMALL))
    out = tmp_path / "run"
    code, _, err = metaforge.cli("train", "--config", config, "--data", data_dir, "--out", out, "--exclude-task", "syn0")
    assert code == 0, err
    code, text, err = metaforge.cli(
        "eval", "--checkpoint", out / "checkpoint.mfck", "--task", "syn0", "--data", data_dir, "--trials", "3"
    )
    assert code == 0, err
    assert json.loads(text)["seeds"] == [0, 1, 2]
    assert metaforge.cli("eval", "--checkpoint", tmp_path / "nope.mfck", "--task", "syn0")[0] == 4
