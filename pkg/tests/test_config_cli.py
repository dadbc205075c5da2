import json

import numpy as np
import pytest
from PIL import Image

from ipanerf.cli import EXIT_CONFIG, EXIT_INPUTS, EXIT_OK, main
from ipanerf.config import apply_overrides, experiment_from_dict, load_config, parse_override, profile
from ipanerf.errors import ConfigError
from ipanerf.metrics import psnr
from ipanerf.runner import load_sweep

TINY = {
    "scene": {"type": "toy", "seed": 1, "n_train": 4, "n_test": 2, "resolution": 16},
    "model": {"depth": 2, "width": 16, "skip": 1, "n_freq_position": 3, "n_freq_direction": 1},
    "training": {"batch_rays": 64, "n_samples": 8, "learning_rate": 0.005, "lr_decay_steps": 1000, "chunk": 512},
    "schedule": {"total_iterations": 20, "epoch_iterations": 10, "attack_iterations": 2, "render_iterations": 2,
                 "epsilon": 32, "use_constraint": 0},
    "target": {"source": "starfield", "backdoor_index": 1},
    "clean_iterations": 20,
    "run_dir": "unused",
    "seed": 0,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_profiles_validate():
    desk = load_config()
    assert desk["scene"]["resolution"] == 64
    s = desk["schedule"]
    assert (s["total_iterations"], s["epoch_iterations"], s["attack_iterations"], s["render_iterations"],
            s["epsilon"], s["use_constraint"]) == (6000, 200, 10, 25, 32, 0)
    paper = experiment_from_dict(load_config("paper", check_paths=False))
    assert paper.schedule.epochs == 1000 and paper.schedule.total_attack_iterations == 10000
    with pytest.raises(ConfigError):
        profile("laptop")


def test_overrides():
    assert parse_override("schedule.epsilon=16") == (["schedule", "epsilon"], 16)
    assert parse_override("target.source=sphere") == (["target", "source"], "sphere")
    assert parse_override("schedule.constraint_angles=[3,5]")[1] == [3, 5]
    doc = apply_overrides(TINY, ["schedule.epsilon=8", "seed=4"])
    assert doc["schedule"]["epsilon"] == 8 and doc["seed"] == 4 and TINY["schedule"]["epsilon"] == 32
    with pytest.raises(ConfigError):
        parse_override("noequals")
    with pytest.raises(ConfigError):
        apply_overrides(TINY, ["seed.x=1"])


def test_validation_errors(tiny_config):
    for bad in (["schedule.epsilon=-1"], ["schedule.epoch_iterations=7"], ["schedule.use_constraint=1"],
                ["scene.bogus=1"], ["schedule.constraint_angles=[0]"]):
        with pytest.raises(ConfigError):
            load_config(tiny_config, bad)
    with pytest.raises(ConfigError):
        load_config(tiny_config, ["target.source=/no/such.png"])
    with pytest.raises(ConfigError):
        load_config(tiny_config.parent / "missing.json")


def test_sweep_specs():
    assert load_sweep("epsilon")["values"] == [8, 16, 32]
    assert len(load_sweep("single_angles")["values"]) == 7
    assert [3, 11] in load_sweep("combined_angles")["values"]
    with pytest.raises(ConfigError):
        load_sweep({"axis": "schedule.epsilon", "values": []})
    with pytest.raises(ConfigError):
        load_sweep({"axis": "training.learning_rate", "values": [1]})
    with pytest.raises(ConfigError):
        load_sweep("nope")


def test_exit_codes(tiny_config, tmp_path, capsys):
    assert main(["--config", str(tiny_config), "--set", "schedule.epsilon=-3", "attack"]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_CONFIG
    assert main(["evaluate", "--run-dir", str(tmp_path / "empty")]) == EXIT_INPUTS
    run = tmp_path / "needs_clean"
    assert main(["attack", "--config", str(tiny_config), "--run-dir", str(run), "--set", "schedule.use_constraint=1",
                 "--set", "schedule.constraint_angles=[5]"]) == EXIT_INPUTS


def test_global_flags_after_verb(tiny_config, tmp_path):
    run = tmp_path / "flags"
    assert main(["--config", str(tiny_config), "--seed", "7", "train-clean", "--run-dir", str(run)]) == EXIT_OK
    assert json.loads((run / "config.json").read_text())["seed"] == 7
    run2 = tmp_path / "flags2"
    assert main(["--config", str(tiny_config), "--set", "clean_iterations=3", "train-clean", "--run-dir", str(run2),
                 "--set", "seed=9"]) == EXIT_OK
    doc = json.loads((run2 / "config.json").read_text())
    assert doc["seed"] == 9 and doc["clean_iterations"] == 3


def test_full_pipeline(tiny_config, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["--config", str(tiny_config), "--run-dir", str(run)]
    assert main(["train-clean"] + args) == EXIT_OK
    assert (run / "clean" / "model.ckpt").is_file()
    assert main(["attack"] + args + ["--set", "schedule.use_constraint=1", "--set",
                                     "schedule.constraint_angles=[5]"]) == EXIT_OK
    for f in ("target.png", "trace.csv", "checkpoints/victim.ckpt", "checkpoints/attack_copy.ckpt",
              "poisoned/manifest.json", "constraints/constraints.json", "manifest.json"):
        assert (run / f).is_file(), f
    assert len(list((run / "poisoned").glob("r_*.png"))) == 4
    capsys.readouterr()
    assert main(["evaluate", "--run-dir", str(run)]) == EXIT_OK
    out = capsys.readouterr().out
    for p in ("V-Illusory", "V-Train", "V-Test", "V-Constraint"):
        assert p in out
    assert (run / "report.csv").is_file()

    # render at the backdoor view agrees with the trace's final epoch
    png = tmp_path / "bd.png"
    assert main(["render", "--run-dir", str(run), "--pose", "train:1", "--output", str(png)]) == EXIT_OK
    rendered = np.asarray(Image.open(png), dtype=np.float64) / 255.0
    target = np.asarray(Image.open(run / "target.png"), dtype=np.float64) / 255.0
    last = (run / "trace.csv").read_text().strip().splitlines()[-1].split(",")
    assert abs(psnr(rendered, target) - float(last[3])) <= 0.1
    png2 = tmp_path / "bd2.png"
    assert main(["render", "--run-dir", str(run), "--pose", "train:1", "--output", str(png2)]) == EXIT_OK
    assert png.read_bytes() == png2.read_bytes()
    assert main(["render", "--run-dir", str(run), "--pose", "sph:4,45,30", "--output", str(png2)]) == EXIT_OK

    for bad in ("train:99", "side:1", "sph:4,0,0", "sph:4,x"):
        assert main(["render", "--run-dir", str(run), "--pose", bad, "--output", str(png2)]) == EXIT_CONFIG
    assert main(["render", "--run-dir", str(run), "--pose", "train:0", "--output", str(png2),
                 "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_INPUTS


def test_same_seed_same_outputs(tiny_config, tmp_path):
    outs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["attack", "--config", str(tiny_config), "--run-dir", str(run)]) == EXIT_OK
        outs.append(run)
    for f in ("checkpoints/victim.ckpt", "checkpoints/attack_copy.ckpt", "trace.csv", "poisoned/r_0.png",
              "poisoned/manifest.json", "target.png"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
    man = [json.loads((r / "manifest.json").read_text()) for r in outs]
    assert man[0]["schedule_hash"] == man[1]["schedule_hash"]


def test_ablate(tiny_config, tmp_path, capsys):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"axis": "schedule.epsilon", "values": [0, 8]}))
    run = tmp_path / "abl"
    assert main(["ablate", "--config", str(tiny_config), "--run-dir", str(run), "--sweep", str(sweep)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "schedule.epsilon" in out and out.count("\n") == 3
    assert (run / "ablation.csv").is_file()
    sweep.write_text(json.dumps({"axis": "schedule.epsilon", "values": []}))
    assert main(["ablate", "--config", str(tiny_config), "--run-dir", str(run), "--sweep", str(sweep)]) == EXIT_CONFIG
