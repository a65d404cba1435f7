import json

import pytest

from treatnet import config as C
from treatnet.cli import main

SMALL = {
    "gen": {"n_full": 500, "n_paired": 150, "embed_width": 16, "L_max": 4},
    "model": {"d": 16, "heads": 2, "tab_embed_dim": 24, "tab_hidden_dim": 8},
    "train": {"learning_rate": 0.01, "max_steps": 40, "eval_every": 20, "tabular": {"learning_rate": 0.05}},
}


# ------------------------------------------------------------------ config


def test_defaults_are_reference_values():
    cfg = C.RunConfig()
    assert cfg.model.d == 512 and cfg.model.tab_embed_dim == 192
    assert cfg.train.learning_rate == 1e-4 and cfg.train.weight_decay == 0.01 and cfg.train.batch_size == 32
    assert cfg.gen.n_full == 10_000 and cfg.gen.signal_split == 0.4


@pytest.mark.parametrize("doc", [
    {"gen": {"n_fulll": 3}},
    {"model": {"width": 3}},
    {"train": {"tabular": {"lr": 0.1}}},
    {"extra": {}},
    {"eval": {"seeds": []}},
    {"model": {"d": 10, "heads": 4}},
])
def test_invalid_configs_are_rejected(doc):
    with pytest.raises(C.ConfigError):
        C.from_dict(doc)


def test_tabular_overrides_apply_only_to_phase_one():
    cfg = C.from_dict({"train": {"learning_rate": 0.01, "tabular": {"learning_rate": 0.2, "max_steps": 7}}})
    assert cfg.fusion_train().learning_rate == 0.01 and cfg.fusion_train().phase == "fusion"
    assert cfg.tabular_train().learning_rate == 0.2 and cfg.tabular_train().max_steps == 7


def test_seed_precedence():
    plain = C.from_dict({})
    seeded = C.from_dict({"train": {"seed": 5}})
    assert C.resolve_seed(plain, None, env={}) == 17
    assert C.resolve_seed(plain, None, env={"TREAT_SEED": "9"}) == 9
    assert C.resolve_seed(seeded, None, env={"TREAT_SEED": "9"}) == 5
    assert C.resolve_seed(seeded, 3, env={"TREAT_SEED": "9"}) == 3
    with pytest.raises(C.ConfigError):
        C.resolve_seed(plain, None, env={"TREAT_SEED": "x"})


def test_resolved_config_round_trips(tmp_path):
    cfg = C.from_dict(SMALL)
    path = C.write_resolved(cfg, tmp_path)
    again = C.from_dict(json.loads(path.read_text()))
    assert again.to_dict() == cfg.to_dict()


# --------------------------------------------------------------------- cli


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert _run("gen-data", "--config", cfg, "--out", root / "data") == 0
    assert _run("pretrain-tab", "--config", cfg, "--data", root / "data", "--out", root / "tab") == 0
    for kind in ("treatnet", "video_only"):
        assert _run("train-fusion", "--config", cfg, "--data", root / "data", "--tab-ckpt", root / "tab",
                    "--out", root / kind, "--model", kind) == 0
    return root, cfg


def test_smoke_pipeline_writes_every_artifact(pipeline):
    root, _ = pipeline
    for f in ("records.csv", "bank.treb", "schema.json", "gen_config.json", "resolved_config.json"):
        assert (root / "data" / f).exists()
    for d in ("tab", "treatnet", "video_only"):
        for f in ("manifest.json", "tensors.f32", "train_log.csv", "resolved_config.json", "preprocessing.json"):
            assert (root / d / f).exists()
    out = root / "eval"
    assert _run("eval", "--ckpts", root / "treatnet", root / "video_only", root / "tab",
                "--data", root / "data", "--out", out) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert set(report) == {"treatnet", "video_only", "tabular_only"}
    assert _run("agreement", "--ckpt-a", root / "treatnet", "--ckpt-b", root / "tab",
                "--data", root / "data", "--out", out) == 0
    agree = json.loads((out / "agreement.json").read_text())
    assert {"n_agree", "acc_class0", "acc_class1"} <= set(agree)


def test_commands_are_idempotent(pipeline):
    root, cfg = pipeline
    before = (root / "treatnet" / "tensors.f32").read_bytes()
    assert _run("train-fusion", "--config", cfg, "--data", root / "data", "--tab-ckpt", root / "tab",
                "--out", root / "treatnet", "--model", "treatnet") == 0
    assert (root / "treatnet" / "tensors.f32").read_bytes() == before
    for name in ("a", "b"):
        assert _run("eval", "--ckpts", root / "treatnet", "--data", root / "data", "--out", root / name) == 0
    assert (root / "a" / "eval_report.csv").read_bytes() == (root / "b" / "eval_report.csv").read_bytes()


def test_width_mismatch_exits_with_data_code(pipeline, capsys):
    root, _ = pipeline
    other = dict(SMALL, gen={**SMALL["gen"], "embed_width": 8})
    cfg2 = root / "narrow.json"
    cfg2.write_text(json.dumps(other))
    assert _run("gen-data", "--config", cfg2, "--out", root / "narrow") == 0
    capsys.readouterr()
    code = _run("eval", "--ckpts", root / "treatnet", "--data", root / "narrow", "--out", root / "bad")
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2
    assert len(err) == 1
    line = json.loads(err[0])
    assert line["code"] == 2 and "16" in line["message"] and "8" in line["message"]


def test_usage_and_missing_file_errors(tmp_path, capsys):
    assert _run("train-fusion") == 1
    assert _run("no-such-command") == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"gen": {"bogus": 1}}')
    assert _run("gen-data", "--config", bad, "--out", tmp_path / "x") == 1
    assert _run("pretrain-tab", "--data", tmp_path / "missing", "--out", tmp_path / "y") == 2
    for line in capsys.readouterr().err.strip().splitlines():
        assert json.loads(line)["code"] in (1, 2)


def test_ablation_writes_a_curve(pipeline):
    root, cfg = pipeline
    out = root / "ablate"
    assert _run("ablate-data-efficiency", "--config", cfg, "--data", root / "data", "--out", out,
                "--fractions", "0.5,1.0", "--seed", "3") == 0
    rows = (out / "data_efficiency.csv").read_text().splitlines()
    assert rows[0] == "model,fraction,seed,n_train,auroc,bacc"
    assert sum(",mean," in r for r in rows) == 4


def test_gradcheck_command_passes(capsys):
    assert _run("gradcheck") == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)
