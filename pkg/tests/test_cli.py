import json

import numpy as np
import pytest
import yaml

from sdnia import cli
from sdnia.evaluation import detections_to_records, write_detections
from sdnia.detector import Detection
from sdnia.imagery import load_dataset

TINY = {
    "seed": 0,
    "train": {"learning_rate": 0.01, "batch_size": 4, "image_size": 32, "max_epochs": 1, "perceptual": "none"},
    "detector": {"width": 4, "depth": [1, 1, 1, 1, 1], "grid_scales": [8, 16]},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("build-dataset", "--source", "shapes", "--n", 6, "--size", 32, "--out", root / "train") == 0
    assert run("build-dataset", "--source", "shapes", "--n", 3, "--size", 32, "--split", "test", "--seed", 9,
               "--degrade", "fog,gamma", "--out", root / "deg") == 0
    assert run("build-dataset", "--source", "shapes", "--n", 3, "--size", 32, "--split", "test", "--seed", 9,
               "--out", root / "clean") == 0
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    return root


def test_build_dataset_counts(workspace):
    assert len(load_dataset(workspace / "train" / "dataset" / "manifest.jsonl")) == 6
    deg = load_dataset(workspace / "deg" / "dataset" / "manifest.jsonl")
    assert sorted({e.origin for e in deg.entries}) == ["fog_synth", "gamma_synth"] and len(deg) == 6
    produced = json.loads((workspace / "train" / cli.PRODUCED).read_text())
    assert any(f["path"] == "dataset/manifest.jsonl" for f in produced["files"])


def test_stylize_count_and_determinism(workspace, capsys):
    content = workspace / "train" / "dataset" / "manifest.jsonl"
    small = workspace / "two"
    rc = run("build-dataset", "--manifest", content, "--out", small)
    assert rc == 0
    # keep two contents
    lines = (small / "dataset" / "manifest.jsonl").read_text().splitlines()
    (small / "dataset" / "manifest.jsonl").write_text("\n".join(lines[:3]) + "\n")
    args = ["stylize", "--content", small / "dataset" / "manifest.jsonl", "--alphas", "0.5,1.0",
            "--set", "stylize.style_names=[fog0,dark0,fog1]"]
    assert run(*args, "--out", workspace / "sty_a") == 0
    assert "2 x 3 x 2 = 12" in capsys.readouterr().out
    images = sorted((workspace / "sty_a" / "stylized" / "images").iterdir())
    assert len(images) == 12
    assert run(*args, "--out", workspace / "sty_b") == 0
    for p in images:
        assert p.read_bytes() == (workspace / "sty_b" / "stylized" / "images" / p.name).read_bytes()


def test_stylize_rejects_bad_alpha_before_writing(workspace):
    out = workspace / "bad_alpha"
    rc = run("stylize", "--content", workspace / "train" / "dataset" / "manifest.jsonl", "--alphas", "0.5,1.5",
             "--out", out)
    assert rc == cli.EXIT_VALIDATION
    assert not out.exists()


def test_cache_dir_env_persists_style_vectors(workspace, monkeypatch):
    monkeypatch.setenv(cli.CACHE_ENV, str(workspace / "cache"))
    rc = run("stylize", "--content", workspace / "train" / "dataset" / "manifest.jsonl", "--alphas", "1.0",
             "--set", "stylize.style_names=[fog0]", "--out", workspace / "sty_cache")
    assert rc == 0
    data = json.loads((workspace / "cache" / "style_vectors_procedural.json").read_text())
    assert len(data) == 6


def test_missing_manifest_is_validation_error(tmp_path):
    assert run("train", "--train-manifest", tmp_path / "nope.jsonl", "--out", tmp_path / "r") == cli.EXIT_VALIDATION
    assert not (tmp_path / "r").exists()


def test_set_override_parsing():
    cfg = cli.apply_overrides({}, ["train.learning_rate=0.02", "detector.grid_scales=[8, 16]"])
    assert cfg == {"train": {"learning_rate": 0.02}, "detector": {"grid_scales": [8, 16]}}
    with pytest.raises(cli.ValidationError):
        cli.apply_overrides({}, ["novalue"])


def test_unknown_train_setting_rejected(workspace, tmp_path):
    rc = run("train", "--config", workspace / "tiny.yaml", "--set", "train.lerning_rate=0.1",
             "--train-manifest", workspace / "train" / "dataset" / "manifest.jsonl", "--out", tmp_path / "r")
    assert rc == cli.EXIT_VALIDATION


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    rc = run("train", "--config", workspace / "tiny.yaml", "--variant", "sdnia",
             "--train-manifest", workspace / "train" / "dataset" / "manifest.jsonl",
             "--val-manifest", workspace / "clean" / "dataset" / "manifest.jsonl", "--out", out)
    assert rc == 0
    return out


def test_train_writes_checkpoint_and_history(trained, capsys):
    assert (trained / "best.pt").exists() and (trained / "last.pt").exists()
    assert len((trained / "history.jsonl").read_text().splitlines()) == 1
    assert yaml.safe_load((trained / "config.yaml").read_text())["train"]["use_nia"] is True


def test_train_baseline_variant_has_no_nia(workspace, tmp_path):
    from sdnia.training import load_checkpoint

    rc = run("train", "--config", workspace / "tiny.yaml", "--variant", "baseline",
             "--train-manifest", workspace / "train" / "dataset" / "manifest.jsonl",
             "--val-manifest", workspace / "clean" / "dataset" / "manifest.jsonl", "--out", tmp_path / "b")
    assert rc == 0
    model, meta = load_checkpoint(tmp_path / "b" / "best.pt")
    assert model.nia is None and not meta["use_nia"]


def test_train_resume(workspace, trained, tmp_path):
    rc = run("train", "--config", workspace / "tiny.yaml", "--set", "train.max_epochs=2",
             "--variant", "sdnia", "--resume", trained / "last.pt",
             "--train-manifest", workspace / "train" / "dataset" / "manifest.jsonl",
             "--val-manifest", workspace / "clean" / "dataset" / "manifest.jsonl", "--out", tmp_path / "r")
    assert rc == 0
    hist = [json.loads(l) for l in (tmp_path / "r" / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [2]


def test_eval_two_columns_and_latency(workspace, trained, capsys):
    out = workspace / "eval"
    rc = run("eval", "--checkpoint", trained / "best.pt", "--test", f"clean={workspace / 'clean/dataset/manifest.jsonl'}",
             "--test", f"degraded={workspace / 'deg/dataset/manifest.jsonl'}", "--latency", "--out", out)
    assert rc == 0
    text = capsys.readouterr().out
    assert "clean" in text and "degraded" in text and "nia overhead" in text
    rep = json.loads((out / "report_degraded.json").read_text())
    row = next(iter(rep["latency_ms"].values()))
    assert row["nia_overhead_ms"] == pytest.approx(row["sdnia_ms"] - row["detector_ms"])


def test_eval_perfect_detections_prints_one(workspace, capsys, tmp_path):
    ds = load_dataset(workspace / "clean" / "dataset" / "manifest.jsonl")
    recs = []
    for e in ds.entries:
        recs += detections_to_records(e.image_id, [Detection(b, 0.9, b.class_id, 0.9) for b in e.boxes])
    write_detections(tmp_path / "d.jsonl", recs)
    rc = run("eval", "--detections", tmp_path / "d.jsonl", "--test",
             f"clean={workspace / 'clean/dataset/manifest.jsonl'}", "--out", tmp_path / "e")
    assert rc == 0
    assert "1.0000" in capsys.readouterr().out


def test_eval_class_universe_mismatch(workspace, trained, tmp_path):
    src = workspace / "clean" / "dataset"
    lines = (src / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    header["class_names"] = ["a", "b", "c"]
    other = tmp_path / "manifest.jsonl"
    body = [json.dumps({**json.loads(l), "image": str(src / json.loads(l)["image"]),
                        "labels": str(src / json.loads(l)["labels"])}) for l in lines[1:]]
    other.write_text("\n".join([json.dumps(header)] + body) + "\n")
    rc = run("eval", "--checkpoint", trained / "best.pt", "--test", f"x={other}", "--out", tmp_path / "e")
    assert rc == cli.EXIT_VALIDATION


def test_detect_writes_adapted_overlay_and_records(workspace, trained, tmp_path):
    imgs = sorted((workspace / "deg" / "dataset" / "images").iterdir())[:2]
    rc = run("detect", "--checkpoint", trained / "best.pt", "--conf", "0.999999", *imgs, "--out", tmp_path / "d")
    assert rc == 0
    for p in imgs:
        assert (tmp_path / "d" / "adapted" / p.name).exists()
        assert (tmp_path / "d" / "overlay" / p.name).exists()
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert [s["detections"] for s in summary["images"]] == [0, 0]
    assert (tmp_path / "d" / "detections.jsonl").read_text() == ""


def test_detect_skips_unreadable(workspace, trained, tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    img = sorted((workspace / "deg" / "dataset" / "images").iterdir())[0]
    with pytest.warns(UserWarning, match="unreadable"):
        rc = run("detect", "--checkpoint", trained / "best.pt", img, bad, "--out", tmp_path / "d")
    assert rc == cli.EXIT_PARTIAL
    assert (tmp_path / "d" / "adapted" / img.name).exists()


def test_overlay_draws_box():
    from sdnia.imagery import BoundingBox

    img = np.zeros((32, 32, 3))
    out = cli.draw_overlay(img, [Detection(BoundingBox(0, 0.5, 0.5, 0.5, 0.5), 0.9, 0, 0.9)], ["x"])
    assert out.shape == img.shape and out[8, 20].sum() > 0 and out[21, 21].sum() == 0


@pytest.mark.parametrize("grid,rows", [("table6", 4), ("table7", 5)])
def test_ablate_grid_shape_and_resume(workspace, grid, rows, tmp_path, capsys):
    args = ["ablate", "--config", workspace / "tiny.yaml", "--grid", grid,
            "--set", "stylize.style_names=[fog0]", "--set", "train.max_epochs=1",
            "--train-manifest", workspace / "train" / "dataset" / "manifest.jsonl",
            "--val-manifest", workspace / "clean" / "dataset" / "manifest.jsonl",
            "--test", f"clean={workspace / 'clean/dataset/manifest.jsonl'}",
            "--test", f"degraded={workspace / 'deg/dataset/manifest.jsonl'}", "--out", tmp_path / "a"]
    assert run(*args) == 0
    result = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert len(result["rows"]) == rows and result["columns"] == ["clean", "degraded"]
    capsys.readouterr()
    before = {p.name: p.stat().st_mtime_ns for p in (tmp_path / "a" / "state").iterdir()}
    assert run(*args, "--resume") == 0
    after = {p.name: p.stat().st_mtime_ns for p in (tmp_path / "a" / "state").iterdir()}
    assert before == after
    assert capsys.readouterr().out.count("\n") >= rows + 2


def test_unknown_grid_rejected(tmp_path):
    with pytest.raises(SystemExit):
        run("ablate", "--grid", "table9")
