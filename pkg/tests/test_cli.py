import csv
import json

import pytest
import yaml

from tpnet.cli import ablation_rows, main
from tpnet.config import ExperimentConfig, load_config
from tpnet.errors import ConfigError

TINY = {
    "backbone": {"kind": "conv2d_segments", "base_channels": 1, "input_frames": 4, "input_size": 32},
    "tpn": {"stages": [4, 5], "alphas": [2, 4], "mod_channels": 4},
    "data": {"seed": 0, "num_classes": 3, "videos_per_class": 2, "val_videos_per_class": 2,
             "video_len": 16, "trajectories": ["hline", "vline", "circle"],
             "tempo_mean": [1.0, 1.0, 1.0], "tempo_sigma": [0.0, 0.2, 0.4],
             "sampling": {"mode": "segments", "num_segments": 4}},
    "train": {"epochs": 1, "milestones": [], "batch_size": 3},
    "analysis": {"bin_width": 1e-9, "strides": [1, 2]},
}


def _write(tmp_path, name="cfg.yaml", replace=(), **changes):
    cfg = json.loads(json.dumps(TINY))
    for key, value in changes.items():
        if value is None:
            cfg.pop(key, None)
        elif isinstance(value, dict) and isinstance(cfg.get(key), dict) and key not in replace:
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg.setdefault("out_dir", str(tmp_path / "run"))
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_gen_data_idempotent_and_refuses(tmp_path, capsys):
    cfg = _write(tmp_path)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d1")]) == 0
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d2")]) == 0
    for split in ("train", "val"):
        a = (tmp_path / "d1" / split / "index.json").read_bytes()
        assert a == (tmp_path / "d2" / split / "index.json").read_bytes()
    labels = {e["class_id"] for e in json.loads(a)}
    assert labels == {0, 1, 2}
    assert (tmp_path / "d1" / "config.lock").exists()
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d1")]) == 4
    assert "--force" in capsys.readouterr().err
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d1"), "--force"]) == 0


def test_gen_data_needs_seed(tmp_path, capsys):
    data = {k: v for k, v in TINY["data"].items() if k != "seed"}
    cfg = _write(tmp_path, data=data, replace=("data",))
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
    assert "data.seed" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--seed", "4"]) == 0


def test_train_eval_resume(tmp_path):
    cfg = _write(tmp_path, train={"epochs": 2, "milestones": [1]})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg]) == 0
    for name in ("config.lock", "history.jsonl", "eval.json", "checkpoint/manifest.json",
                 "checkpoint/weights.bin"):
        assert (out / name).exists()
    hist = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [0, 1]
    report = json.loads((out / "eval.json").read_text())
    assert set(report) == {"top1", "top5", "per_class_top1", "num_samples"}
    assert report["top5"] >= report["top1"]
    assert main(["train", "--config", cfg]) == 4          # checkpoint exists

    # resume from the epoch-1 checkpoint of a shorter run continues numbering
    short = _write(tmp_path, "short.yaml", out_dir=str(tmp_path / "short"),
                   train={"epochs": 1, "milestones": []})
    assert main(["train", "--config", short]) == 0
    resumed = _write(tmp_path, "resumed.yaml", out_dir=str(tmp_path / "resumed"),
                     train={"epochs": 2, "milestones": [1]})
    assert main(["train", "--config", resumed, "--resume", str(tmp_path / "short" / "checkpoint")]) == 0
    hist2 = [json.loads(line) for line in (tmp_path / "resumed" / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist2] == [0, 1]
    assert hist2 == hist
    a = (out / "checkpoint" / "weights.bin").read_bytes()
    assert a == (tmp_path / "resumed" / "checkpoint" / "weights.bin").read_bytes()

    other = _write(tmp_path, "other.yaml", out_dir=str(tmp_path / "o"), tpn=None)
    assert main(["train", "--config", other, "--resume", str(out / "checkpoint")]) == 2

    evcfg = _write(tmp_path, "ev.yaml", out_dir=str(tmp_path / "ev"), eval={"crop_protocol": "ten_crop"})
    assert main(["eval", "--config", evcfg, "--checkpoint", str(out / "checkpoint")]) == 0
    ev = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert ev["num_samples"] == 6 and ev["top5"] >= ev["top1"]
    assert main(["eval", "--config", evcfg, "--checkpoint", str(tmp_path / "nope")]) == 4


def test_baseline_when_tpn_absent(tmp_path):
    cfg = _write(tmp_path, tpn=None)
    assert main(["train", "--config", cfg]) == 0
    manifest = json.loads((tmp_path / "run" / "checkpoint" / "manifest.json").read_text())
    assert manifest["model"]["tpn"] is None


def test_analyze_outputs_and_identical_models(tmp_path):
    # a few epochs so the per-frame curves stop being flat
    data = {"videos_per_class": 6, "tempo_sigma": [0.0, 0.3, 0.6]}
    train_cfg = {"epochs": 4, "milestones": [], "lr": 0.05}
    base = _write(tmp_path, "base.yaml", tpn=None, out_dir=str(tmp_path / "base"), data=data,
                  train=train_cfg)
    assert main(["train", "--config", base]) == 0
    ck = str(tmp_path / "base" / "checkpoint")
    cfg = _write(tmp_path, "an.yaml", out_dir=str(tmp_path / "an"), data=data)
    assert main(["analyze", "--config", cfg, "--base", ck, "--tpn", ck]) == 0
    out = tmp_path / "an"
    fit = json.loads((out / "fit.json").read_text())
    assert fit["slope"] == 0.0
    with open(out / "robustness.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["model"] for r in rows} == {"base", "tpn"}
    assert sorted({int(r["stride"]) for r in rows}) == [1, 2]
    for name in ("tempo_records.csv", "class_variance.csv", "gain_vs_variance.csv", "config.lock"):
        assert (out / name).exists()
    with open(out / "tempo_records.csv") as fh:
        assert next(csv.reader(fh)) == ["video_id", "class_id", "fwhm"]
    assert main(["analyze", "--config", cfg, "--base", ck, "--tpn", ck]) == 4


def test_analyze_rejects_tpn_as_base(tmp_path):
    cfg = _write(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    ck = str(tmp_path / "run" / "checkpoint")
    assert main(["analyze", "--config", cfg, "--base", ck, "--tpn", ck, "--out",
                 str(tmp_path / "an")]) == 2


def test_analyze_undefined_fit_still_writes(tmp_path):
    base = _write(tmp_path, "base.yaml", tpn=None, out_dir=str(tmp_path / "base"))
    assert main(["train", "--config", base]) == 0
    ck = str(tmp_path / "base" / "checkpoint")
    cfg = _write(tmp_path, "an.yaml", out_dir=str(tmp_path / "an"), analysis={"bin_width": 1e9})
    assert main(["analyze", "--config", cfg, "--base", ck, "--tpn", ck]) == 3
    fit = json.loads((tmp_path / "an" / "fit.json").read_text())
    assert fit["pearson_r"] is None and "error" in fit
    assert (tmp_path / "an" / "robustness.csv").exists()


def test_ablation_rows():
    cfg = ExperimentConfig.from_dict(json.loads(json.dumps(TINY)))
    flows = ablation_rows("flows", cfg)
    assert [r[0] for r in flows] == ["Isolation", "BottomUp", "TopDown", "Cascade", "Parallel"]
    sources = ablation_rows("sources", cfg)
    assert [r[0] for r in sources] == ["None", "res{2,3,4,5}", "res{3,4,5}", "res{4,5}", "res{5}"]
    assert sources[0][2] is None and sources[-1][2].alphas == (8,)
    comps = ablation_rows("components", cfg)
    assert len(comps) == 7 and comps[0][2] is None
    frames = ablation_rows("frames", cfg)
    assert [r[1].input_frames for r in frames] == [8, 8, 16, 16, 32, 32]
    with pytest.raises(ConfigError):
        ablation_rows("depth", cfg)


def test_ablate_flows_runs(tmp_path):
    cfg = _write(tmp_path, data={"videos_per_class": 1, "val_videos_per_class": 1})
    assert main(["ablate", "--config", cfg, "--axis", "flows"]) == 0
    with open(tmp_path / "run" / "ablation_flows.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["Isolation", "BottomUp", "TopDown", "Cascade", "Parallel"]


def test_usage_errors(tmp_path, capsys):
    cfg = _write(tmp_path)
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--config", cfg, "--axis", "depth"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 4


@pytest.mark.parametrize("changes,field", [
    ({"data": {"sampling": {"mode": "segments", "num_segments": 8}}}, "data.sampling.num_segments"),
    ({"tpn": {"alphas": [3, 4]}}, "tpn.alphas"),
    ({"train": {"epochs": 2, "milestones": [5]}}, "train.milestones"),
    ({"backbone": {"kind": "conv3d"}}, "data.sampling.mode"),
    ({"bogus": 1}, "bogus"),
    ({"eval": {"crop_protocol": "five"}}, "eval.crop_protocol"),
])
def test_validation_before_side_effects(tmp_path, capsys, changes, field):
    cfg = _write(tmp_path, **changes)
    assert main(["train", "--config", cfg]) == 2
    assert field in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_gradcheck_command(tmp_path, repo):
    cfg = str(repo / "configs" / "gradcheck_toy.yaml")
    out = str(tmp_path / "gc")
    code = main(["gradcheck", "--config", cfg, "--out", out, "--max-coords", "100"])
    result = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
    assert code == 0 and result["max_rel_error"] < 1e-4
    assert main(["gradcheck", "--config", cfg, "--out", out, "--max-coords", "20", "--tol", "0"]) == 3


def test_shipped_configs_validate(repo):
    for path in sorted((repo / "configs").glob("*.yaml")):
        cfg = load_config(path)
        assert cfg.dump() and cfg.data.seed_given
