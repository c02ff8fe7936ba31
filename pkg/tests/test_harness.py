import json

import numpy as np
import pytest

from cilforge.cli import main as cli_main
from cilforge.config import ConfigError, parse_config, parse_config_dict
from cilforge.datastream import synth_blobs, write_table_dataset
from cilforge.evaluator import validate_report
from cilforge.harness import CKPT_MAGIC, CheckpointError, HarnessError, read_checkpoint, run

TINY_BACKBONE = {"embed_dim": 8, "depth": 3, "heads": 2, "token_count": 4, "seed": 3}


def cfg_dict(name="simplecil", **over):
    d = {"model_name": name, "init_cls": 2, "increment": 2, "backbone_type": "frozen_random",
         "backbone": TINY_BACKBONE, "optimization": {"epochs": 1, "batch_size": 8},
         "dataset": {"num_classes": 6, "per_class": 5, "test_per_class": 3, "dim": 8, "seed": 11}}
    d.update(over)
    return d


def write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


# ----------------------------------------------------------------- config

def test_minimal_config_defaults():
    cfg = parse_config_dict({"model_name": "simplecil", "init_cls": 10, "increment": 10, "dataset": {}})
    assert cfg.seed == 1993
    assert cfg.backbone_type == "frozen_pretrained_toy"
    assert cfg.memory_size == 2000 and cfg.fixed_memory is False
    assert cfg.optimization.temperature == 2.0


def test_exemplar_params_for_l2p_are_a_notice(caplog):
    with caplog.at_level("INFO"):
        cfg = parse_config_dict(cfg_dict("l2p", memory_size=200, fixed_memory=True))
    assert cfg.memory_size == 200
    assert "does not use exemplars" in caplog.text


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.pop("init_cls"), "init_cls"),
    (lambda d: d.pop("dataset"), "dataset"),
    (lambda d: d.update(model_name="lwf"), "model_name"),
    (lambda d: d.update(seed="1993"), "seed"),
    (lambda d: d.update(fixed_memory=1), "fixed_memory"),
    (lambda d: d.update(increment=True), "increment"),
    (lambda d: d.update(epochs=3), "epochs"),
    (lambda d: d.update(optimization={"lr": "fast"}), "optimization.lr"),
    (lambda d: d.update(optimization={"momentum": 0.9}), "optimization.momentum"),
    (lambda d: d.update(optimization={"milestones": [1, "2"]}), "optimization.milestones"),
    (lambda d: d.update(optimization={"optimizer": "rmsprop"}), "optimization.optimizer"),
    (lambda d: d.update(model_specific={"prompt_pool": 3}), "model_specific.prompt_pool"),
    (lambda d: d.update(dataset={"train_path": "a.clds"}), "dataset.test_path"),
    (lambda d: d.update(dataset={"name": "cifar100"}), "dataset.name"),
    (lambda d: d.update(init_cls=0), "init_cls"),
])
def test_config_errors_name_the_field(mutate, field):
    d = cfg_dict()
    mutate(d)
    with pytest.raises(ConfigError) as e:
        parse_config_dict(d)
    assert e.value.field == field


def test_model_name_case_insensitive():
    assert parse_config_dict(cfg_dict("CODA-Prompt")).model_name == "coda-prompt"


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        parse_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(bad)


def test_shipped_configs_parse():
    from pathlib import Path
    paths = sorted(Path(__file__).parents[1].joinpath("exps").glob("*.json"))
    names = {parse_config(p).model_name for p in paths}
    assert len(paths) == 15 and len(names) == 11


# -------------------------------------------------------------------- run

def test_finetune_ten_tasks():
    d = cfg_dict("finetune", init_cls=1, increment=1)
    d["dataset"]["num_classes"] = 10
    rep = run(parse_config_dict(d))
    assert len(rep.stages) == 10 and rep.seen_classes == list(range(1, 11))
    assert rep.final == rep.stages[-1]


def test_simplecil_twice_byte_identical(tmp_path):
    cfg = parse_config_dict(cfg_dict())
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()
    a = json.loads((tmp_path / "a/results.json").read_text())
    b = json.loads((tmp_path / "b/results.json").read_text())
    a.pop("wall_clock"), b.pop("wall_clock")
    assert a == b


def test_icarl_quota_from_budget(tmp_path):
    d = cfg_dict("icarl", init_cls=4, increment=4, memory_size=200)
    d["dataset"].update(num_classes=20, per_class=12)
    cfg = parse_config_dict(d)
    run(cfg, tmp_path)
    _, payload = read_checkpoint(tmp_path / "checkpoints/task4.ckpt")
    store = payload["learner"]._store
    assert store.classes() == list(range(20)) and all(store.count(c) == 10 for c in range(20))


def test_provenance_lists_decisions():
    rep = run(parse_config_dict(cfg_dict("coda-prompt")))
    prov = rep.provenance
    assert prov["seed"] == 1993 and prov["prng"] == "splitmix64-fisher-yates"
    assert any(s.startswith("coda-prompt: ortho") for s in prov["decisions"])
    assert any("memory update precedes evaluation" in s for s in prov["decisions"])


def test_checkpoint_header(tmp_path):
    run(parse_config_dict(cfg_dict()), tmp_path)
    raw = (tmp_path / "checkpoints/task0.ckpt").read_bytes()
    assert raw.startswith(CKPT_MAGIC)
    meta = json.loads(raw.split(b"\n")[1])
    assert meta["task"] == 0 and len(meta["config_hash"]) == 64


def test_resume_rejects_other_config(tmp_path):
    run(parse_config_dict(cfg_dict()), tmp_path, stop_after=0)
    with pytest.raises(CheckpointError):
        run(parse_config_dict(cfg_dict(seed=7)), resume=tmp_path / "checkpoints/task0.ckpt")


def test_resume_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        read_checkpoint(p)


@pytest.mark.parametrize("name", ["icarl", "dualprompt", "memo"])
def test_resume_equals_uninterrupted(tmp_path, name):
    cfg = parse_config_dict(cfg_dict(name))
    full = run(cfg, tmp_path / "full")
    run(cfg, tmp_path / "part", stop_after=0)
    resumed = run(cfg, tmp_path / "part", resume=tmp_path / "part/checkpoints/task0.ckpt")
    assert resumed.stages == full.stages and resumed.per_task == full.per_task
    assert (tmp_path / "full/results.csv").read_bytes() == (tmp_path / "part/results.csv").read_bytes()


def test_errors_carry_task_index(tmp_path):
    d = cfg_dict("coda-prompt", model_specific={"pool_size": 3, "layers": [9]})
    with pytest.raises(Exception):
        run(parse_config_dict(d))
    # failures during the loop name the task
    d = cfg_dict("simplecil")
    cfg = parse_config_dict(d)
    import cilforge.harness as h
    orig = h.DataManager.get_dataset

    def broken(self, task, source="train", scope="current"):
        if task == 1:
            raise RuntimeError("disk gone")
        return orig(self, task, source, scope)

    h.DataManager.get_dataset = broken
    try:
        with pytest.raises(HarnessError, match="task 1"):
            run(cfg)
    finally:
        h.DataManager.get_dataset = orig


def test_clds_dataset_config(tmp_path):
    pair = synth_blobs(4, 5, 8, seed=2, test_per_class=3)
    write_table_dataset(pair.train, tmp_path / "tr.clds")
    write_table_dataset(pair.test, tmp_path / "te.clds")
    d = cfg_dict(dataset={"train_path": str(tmp_path / "tr.clds"), "test_path": str(tmp_path / "te.clds")})
    rep = run(parse_config_dict(d))
    assert rep.seen_classes == [2, 4]


# -------------------------------------------------------------------- CLI

def test_cli_requires_config(capsys):
    with pytest.raises(SystemExit) as e:
        cli_main([])
    assert e.value.code == 2
    assert "--config" in capsys.readouterr().err


def test_cli_bad_path(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    assert cli_main(["--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_bad_config_exit_1(tmp_path, capsys):
    p = write(tmp_path, cfg_dict(model_name="lwf"))
    assert cli_main(["--config", str(p)]) == 1
    assert "model_name" in capsys.readouterr().err


def test_cli_runs_and_writes(tmp_path, capsys):
    p = write(tmp_path, cfg_dict())
    out = tmp_path / "out"
    assert cli_main(["--config", str(p), "--out", str(out), "--log-level", "WARNING"]) == 0
    validate_report(json.loads((out / "results.json").read_text()))
    assert capsys.readouterr().out.startswith("simplecil  ")


def test_cli_resume(tmp_path):
    p = write(tmp_path, cfg_dict("der"))
    full = tmp_path / "full"
    assert cli_main(["--config", str(p), "--out", str(full), "--log-level", "ERROR"]) == 0
    part = tmp_path / "part"
    run(parse_config(p), part, stop_after=1)
    assert cli_main(["--config", str(p), "--out", str(part), "--log-level", "ERROR",
                     "--resume", str(part / "checkpoints/task1.ckpt")]) == 0
    assert (full / "results.csv").read_bytes() == (part / "results.csv").read_bytes()


def test_cli_missing_checkpoint(tmp_path, capsys):
    p = write(tmp_path, cfg_dict())
    assert cli_main(["--config", str(p), "--resume", str(tmp_path / "no.ckpt")]) == 2
    assert "no.ckpt" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    p = write(tmp_path, cfg_dict())
    r = subprocess.run([sys.executable, "-m", "cilforge", "--config", str(p), "--out",
                        str(tmp_path / "o"), "--log-level", "ERROR"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "o/results.csv").exists()
    np.testing.assert_equal(r.stdout.split()[0], "simplecil")
