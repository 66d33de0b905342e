import dataclasses
import os

import numpy as np
import pytest

from auprobe import cli, data, model
from auprobe.cli import main, parse_config_file, write_resolved_config
from auprobe.harvest import ActivationDB


@pytest.fixture()
def dataset(tmp_path):
    spec = data.default_synthetic_spec(samples_per_class=3, seed=21)
    out = tmp_path / "ds"
    data.generate_synthetic(spec, out)
    return out / "manifest.csv"


@pytest.fixture()
def config_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text(
        "\n".join(
            [
                "# desk-scale configuration",
                "model.input_size=48",
                "model.conv_channels=8,16,32",
                "model.fc_hidden=32",
                "model.num_classes=4",
                "model.seed=2",
                "train.batch_size=8",
                "train.epochs=2",
                "train.seed=2",
                "train.augment=false",
            ]
        )
        + "\n"
    )
    return p


def test_usage_error_exits_1(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1  # missing required flags
    assert main(["no-such-command"]) == 1


def test_config_parse_roundtrip(tmp_path, config_file):
    mc, tc = parse_config_file(config_file)
    assert mc.conv_channels == (8, 16, 32)
    assert tc.augment is False
    resolved = tmp_path / "resolved.txt"
    write_resolved_config(mc, tc, resolved)
    mc2, tc2 = parse_config_file(resolved)
    assert (mc2, tc2) == (mc, tc)


def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("model.flux_capacitance=1\n")
    assert main(["train", "--manifest", "x.csv", "--config", str(p), "--out", "o.ckpt"]) == 2


def test_missing_manifest_is_data_error(config_file, tmp_path):
    rc = main(
        ["train", "--manifest", str(tmp_path / "nope.csv"), "--config", str(config_file),
         "--out", str(tmp_path / "o.ckpt")]
    )
    assert rc == 2


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "synth"
    spec = data.default_synthetic_spec(samples_per_class=2, seed=5)
    spec_path = tmp_path / "spec.json"
    data.save_synthetic_spec(spec, spec_path)
    assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
    manifest = data.load_manifest(out / "manifest.csv")
    assert len(manifest) == 8
    assert (out / "spec_resolved.json").is_file()


def test_train_harvest_associate_chain(tmp_path, dataset, config_file, capsys):
    ckpt = tmp_path / "run.ckpt"
    log = tmp_path / "metrics.csv"
    assert main(["train", "--manifest", str(dataset), "--config", str(config_file),
                 "--out", str(ckpt), "--log", str(log)]) == 0
    assert ckpt.is_file() and log.is_file()
    assert (tmp_path / "run.config.txt").is_file()

    db_path = tmp_path / "db.csv"
    assert main(["harvest", "--checkpoint", str(ckpt), "--manifest", str(dataset),
                 "--out", str(db_path)]) == 0
    db = ActivationDB.load(db_path)
    assert db.num_images == 12 and db.num_maps == 32

    out = tmp_path / "assoc"
    assert main(["associate", "--db", str(db_path), "--manifest", str(dataset),
                 "--au", "all", "--n", "3", "--out", str(out)]) == 0
    assert (out / "summary" / "index.csv").is_file()
    for au in (1, 2, 3, 4):
        assert (out / "profiles" / f"au_{au}.csv").is_file()
    captured = capsys.readouterr()
    assert "associate: AU 1" in captured.out


def test_associate_rejects_foreign_db(tmp_path, dataset, config_file):
    ckpt = tmp_path / "run.ckpt"
    assert main(["train", "--manifest", str(dataset), "--config", str(config_file),
                 "--out", str(ckpt)]) == 0
    db_path = tmp_path / "db.csv"
    assert main(["harvest", "--checkpoint", str(ckpt), "--manifest", str(dataset),
                 "--out", str(db_path)]) == 0
    # different manifest -> provenance mismatch -> data error
    other = tmp_path / "other"
    data.generate_synthetic(data.default_synthetic_spec(samples_per_class=2, seed=9), other)
    rc = main(["associate", "--db", str(db_path), "--manifest", str(other / "manifest.csv"),
               "--out", str(tmp_path / "x")])
    assert rc == 2


def test_deconv_writes_montage_and_responses(tmp_path, dataset, config_file):
    ckpt = tmp_path / "run.ckpt"
    assert main(["train", "--manifest", str(dataset), "--config", str(config_file),
                 "--out", str(ckpt)]) == 0
    out = tmp_path / "dec"
    assert main(["deconv", "--checkpoint", str(ckpt), "--manifest", str(dataset),
                 "--map", "1", "--top", "2", "--out", str(out)]) == 0
    assert (out / "map_1_orig.png").is_file()
    assert (out / "map_1_deconv.png").is_file()
    responses = sorted(p.name for p in out.glob("img*_L3_m1_r*_deconv.png"))
    assert len(responses) == 2


def test_env_seed_overrides(tmp_path, dataset, config_file, monkeypatch):
    ckpts = []
    for seed_env in ("77", "78"):
        monkeypatch.setenv(cli.ENV_SEED, seed_env)
        ckpt = tmp_path / f"s{seed_env}.ckpt"
        assert main(["train", "--manifest", str(dataset), "--config", str(config_file),
                     "--out", str(ckpt)]) == 0
        ckpts.append(ckpt.read_bytes())
    assert ckpts[0] != ckpts[1]
    mc, tc = parse_config_file(tmp_path / "s77.config.txt")
    assert mc.seed == 77 and tc.seed == 77


def test_pipeline_default_spec_runs_and_is_deterministic(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.ENV_SEED, raising=False)
    spec = data.default_synthetic_spec(samples_per_class=2, seed=13)
    spec_path = tmp_path / "spec.json"
    data.save_synthetic_spec(spec, spec_path)
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(
        "model.input_size=48\nmodel.conv_channels=8,16,32\nmodel.fc_hidden=32\n"
        "model.num_classes=4\nmodel.seed=3\n"
        "train.batch_size=8\ntrain.epochs=2\ntrain.seed=3\ntrain.augment=false\n"
    )
    outputs = []
    for name in ("runA", "runB"):
        out = tmp_path / name
        assert main(["pipeline", "--spec", str(spec_path), "--config", str(cfg),
                     "--out", str(out), "--n", "3"]) == 0
        assert (out / "checkpoint.ckpt").is_file()
        assert (out / "db.csv").is_file()
        assert (out / "config_resolved.txt").is_file()
        profile_bytes = {
            p.name: p.read_bytes() for p in sorted((out / "profiles").glob("au_*.csv"))
        }
        outputs.append((profile_bytes, (out / "db.csv").read_bytes()))
    assert outputs[0][0].keys() == outputs[1][0].keys()
    for name in outputs[0][0]:
        assert outputs[0][0][name] == outputs[1][0][name], name
    assert outputs[0][1] == outputs[1][1]


def test_pipeline_stage_failure_names_stage(tmp_path, capsys):
    bad_manifest = tmp_path / "nope.csv"
    rc = main(["pipeline", "--manifest", str(bad_manifest), "--out", str(tmp_path / "run")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "stage 'synth'" in err
