import json

import nibabel as nib
import numpy as np
import pytest

from becdiff.cli import EXIT_OK, EXIT_VALIDATION, main, train_config_from_args, build_parser
from becdiff.ingest import read_matrix

SMALL_SYNTH = ["--n-rois", "4", "--length", "16", "--n-subjects-per-class", "5"]
SMALL_TRAIN = ["--T", "8", "--s", "4", "--beta-min", "0.01", "--beta-max", "0.2", "--levels", "1",
               "--blocks-per-level", "1", "--heads", "1", "--d-embed-dim", "8", "--cls-hidden", "8",
               "--epochs", "2", "--batch-size", "4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert run("synth", "--out", out, "--seed", 3, *SMALL_SYNTH) == EXIT_OK
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run_manifest.json"}


def test_synth_layout_and_determinism(tmp_path, dataset):
    assert sorted(p.name for p in dataset.iterdir() if p.is_dir()) == ["class0", "class1"]
    again = tmp_path / "again"
    run("synth", "--out", again, "--seed", 3, *SMALL_SYNTH)
    assert tree_bytes(dataset) == tree_bytes(again)
    manifest = json.loads((dataset / "run_manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    assert "manifest.csv" in manifest["outputs"]
    assert len(manifest["outputs"]) == 1 + 10 * 3


def test_synth_zero_density(tmp_path):
    out = tmp_path / "d0"
    run("synth", "--out", out, "--density", 0, *SMALL_SYNTH)
    for p in out.rglob("*_bec.csv"):
        assert not read_matrix(p).any()


def test_extract_toy_volume(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.standard_normal((3, 3, 2, 197)).astype(np.float32)
    labels = np.zeros((3, 3, 2), dtype=np.int16)
    labels[0] = 1
    labels[1:, :, 0] = 2
    labels[1:, :, 1] = 3
    nib.save(nib.Nifti1Image(vol, np.eye(4)), tmp_path / "vol.nii.gz")
    nib.save(nib.Nifti1Image(labels, np.eye(4)), tmp_path / "atlas.nii.gz")
    out = tmp_path / "ex"
    assert run("extract", "--volume", tmp_path / "vol.nii.gz", "--atlas", tmp_path / "atlas.nii.gz",
               "--out", out) == EXIT_OK
    series = read_matrix(out / "rough.csv")
    assert series.shape == (3, 187)
    np.testing.assert_allclose(series[1], vol[1:, :, 0, 10:].astype(np.float64).reshape(-1, 187).mean(0),
                               rtol=1e-12)

    nib.save(nib.Nifti1Image(labels[:2], np.eye(4)), tmp_path / "small.nii.gz")
    assert run("extract", "--volume", tmp_path / "vol.nii.gz", "--atlas", tmp_path / "small.nii.gz",
               "--out", out) == EXIT_VALIDATION


def test_invalid_ablation_combo_exits_2(tmp_path, dataset, capsys):
    code = run("train", "--manifest", dataset / "manifest.csv", "--out", tmp_path / "run",
               "--no-sma", "--no-tma", "--sete-as-conv", *SMALL_TRAIN)
    assert code == EXIT_VALIDATION
    assert "sete_as_conv" in capsys.readouterr().err


def test_missing_manifest_exits_2(tmp_path):
    assert run("train", "--manifest", tmp_path / "nope.csv", "--out", tmp_path) == EXIT_VALIDATION


def test_config_precedence_three_layers(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[train]\ngamma = 0.5\nlr_d = 0.001\n")
    parser = build_parser()
    args = parser.parse_args(["train", "--manifest", "m", "--config", str(cfg), "--gamma", "2.5"])
    resolved = train_config_from_args(args)
    assert resolved.gamma == 2.5          # flag beats file
    assert resolved.lr_d == 0.001         # file beats default
    assert resolved.lr_g == 1e-3          # default survives
    args = parser.parse_args(["train", "--manifest", "m", "--preset", "tiny", "--seed", "9"])
    resolved = train_config_from_args(args)
    assert (resolved.T, resolved.seed) == (16, 9)
    args = parser.parse_args(["train", "--manifest", "m", "--no-hierarchy", "--no-normalize"])
    resolved = train_config_from_args(args)
    assert resolved.no_hierarchy and not resolved.normalize and not resolved.no_sma
    cfg.write_text("[train]\nbogus = 1\n")
    assert run("train", "--manifest", "m", "--config", cfg) == EXIT_VALIDATION


def test_train_sample_evaluate_pipeline(tmp_path, dataset):
    manifest = dataset / "manifest.csv"
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--manifest", manifest, "--out", out, "--seed", 1, *SMALL_TRAIN) == EXIT_OK
        runs.append(out)
    log_a, log_b = ((r / "metrics.jsonl").read_bytes() for r in runs)
    assert log_a == log_b and len(log_a.splitlines()) == 2
    assert "[train]" in (runs[0] / "config.toml").read_text()
    ckpt = runs[0] / "checkpoints" / "final.pt"

    samples = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert run("sample", "--checkpoint", ckpt, "--manifest", manifest, "--out", out,
                   "--seed", 4) == EXIT_OK
        samples.append(out)
    assert tree_bytes(samples[0]) == tree_bytes(samples[1])
    for p in samples[0].glob("*_bec.csv"):
        assert np.all(np.diag(read_matrix(p)) == 0)

    multi = tmp_path / "multi"
    run("sample", "--checkpoint", ckpt, "--manifest", manifest, "--out", multi, "--n-samples", 5,
        "--fold", 0)
    stds = list(multi.glob("*_bec_std.csv"))
    assert len(stds) == 2 and all(read_matrix(p).shape == (4, 4) for p in stds)

    ev = tmp_path / "ev"
    assert run("evaluate", "--samples", samples[0], "--manifest", manifest, "--out", ev,
               "--k", 5) == EXIT_OK
    metrics = json.loads((ev / "metrics.json").read_text())
    assert "class0vsclass1" in metrics and "edge_recovery_auroc" in metrics
    assert set(metrics["class0vsclass1"]["linear-margin"]["mean"]) == {"acc", "sen", "spe", "auc"}
    top = json.loads((ev / "top_connections.json").read_text())["class0vsclass1"]
    assert len(top["enhanced"]) <= 10 and len(top["diminished"]) <= 10
    for name in ("bec_avg_class0.csv", "bec_avg_class1.csv", "delta_class0_class1.csv",
                 "roi_importance.csv"):
        assert (ev / name).exists()
    listed = json.loads((ev / "run_manifest.json").read_text())["outputs"]
    assert sorted(listed) == sorted(p.name for p in ev.iterdir() if p.name != "run_manifest.json")

    ev2 = tmp_path / "ev2"
    run("evaluate", "--samples", samples[0], "--manifest", manifest, "--out", ev2, "--k", 5)
    assert tree_bytes(ev) == tree_bytes(ev2)


def test_resume_continues_log(tmp_path, dataset):
    manifest = dataset / "manifest.csv"
    full, part = tmp_path / "full", tmp_path / "part"
    run("train", "--manifest", manifest, "--out", full, *SMALL_TRAIN, "--epochs", 4)
    run("train", "--manifest", manifest, "--out", part, *SMALL_TRAIN, "--epochs", 4,
        "--epochs-to-run", 2)
    assert run("train", "--manifest", manifest, "--out", part,
               "--resume", part / "checkpoints" / "final.pt") == EXIT_OK
    assert (full / "metrics.jsonl").read_bytes() == (part / "metrics.jsonl").read_bytes()
