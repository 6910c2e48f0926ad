import json
import os

import numpy as np
import pytest

from spinrecon import cli
from spinrecon import plyio
from spinrecon.renderer import read_pgm16


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    rc = run_cli("gen-data", "--out", str(out), "--views", "12", "--val", "2",
                 "--size", "20", "--supersample", "1", "--seed", "3")
    assert rc == 0
    return str(out)


@pytest.fixture(scope="module")
def cli_run(cli_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    rc = run_cli("train", "--mode", "baseline", "--data", cli_dataset,
                 "--out", str(out), "--steps", "30", "--batch", "64",
                 "--n-coarse", "16", "--n-fine", "16",
                 "--schedule-steps", "10", "--checkpoint-every", "1000000")
    assert rc == 0
    return str(out)


def test_gen_data_writes_dataset(cli_dataset):
    assert os.path.exists(os.path.join(cli_dataset, "manifest.json"))
    assert os.path.exists(os.path.join(cli_dataset, "gt_cloud.ply"))
    assert os.path.exists(os.path.join(cli_dataset, "images", "0000.pgm"))
    assert os.path.exists(os.path.join(cli_dataset, "resolved_config.txt"))


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("gen-data", "--out", str(out), "--views", "10", "--val", "2",
                       "--size", "16", "--supersample", "1", "--seed", "5") == 0
    assert (a / "images/0004.pgm").read_bytes() == (b / "images/0004.pgm").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_gen_data_rejects_too_few_views(tmp_path, capsys):
    rc = run_cli("gen-data", "--out", str(tmp_path / "x"), "--views", "3")
    assert rc == 1


def test_usage_error_exit_code():
    assert run_cli("train", "--mode", "bogus", "--data", "x", "--out", "y") == 1
    assert run_cli("no-such-command") == 1


def test_train_writes_artifacts(cli_run):
    for name in ("checkpoint.bin", "log.csv", "resolved_config.txt",
                 "estimated_poses.json", "train_config.json"):
        assert os.path.exists(os.path.join(cli_run, name)), name


def test_train_without_ground_truth_fails_cleanly(cli_dataset, tmp_path):
    import shutil
    stripped = tmp_path / "nogt"
    shutil.copytree(cli_dataset, stripped)
    man = json.load(open(stripped / "manifest.json"))
    for e in man["images"]:
        del e["rotation_aa"]
    json.dump(man, open(stripped / "manifest.json", "w"))
    rc = run_cli("train", "--mode", "indep", "--data", str(stripped),
                 "--out", str(tmp_path / "run"), "--steps", "3")
    assert rc == 1


def test_render_command(cli_run, cli_dataset, tmp_path):
    out = tmp_path / "renders"
    rc = run_cli("render", "--run", cli_run, "--data", cli_dataset,
                 "--out", str(out), "--views", "val",
                 "--n-coarse", "16", "--n-fine", "16")
    assert rc == 0
    pgms = sorted(p.name for p in out.glob("*_radiance.pgm"))
    assert len(pgms) == 2
    img = read_pgm16(next(out.glob("*_radiance.pgm")))
    assert img.shape == (20, 20)
    assert len(list(out.glob("*_normal.ppm"))) == 2
    assert len(list(out.glob("*_depth.pgm"))) == 2
    assert len(list(out.glob("*_acc.pgm"))) == 2


def test_render_missing_checkpoint_fails(cli_dataset, tmp_path):
    rc = run_cli("render", "--run", str(tmp_path / "nope"), "--data", cli_dataset,
                 "--out", str(tmp_path / "o"))
    assert rc != 0


def test_export_command(cli_run, cli_dataset, tmp_path):
    out = tmp_path / "export"
    rc = run_cli("export", "--run", cli_run, "--data", cli_dataset,
                 "--out", str(out), "--grid-res", "24",
                 "--n-coarse", "16", "--n-fine", "16")
    assert rc == 0
    pts, err = plyio.read_ply_points(out / "cloud.ply")
    assert err is not None  # per-point distance channel present
    assert os.path.exists(out / "mesh.ply")


def test_eval_command(cli_run, cli_dataset, tmp_path):
    report_path = tmp_path / "report.json"
    rc = run_cli("eval", "--run", cli_run, "--data", cli_dataset,
                 "--out", str(report_path), "--n-coarse", "16", "--n-fine", "16")
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert set(report) == {"precision_mm", "recall_mm", "psnr_per_view",
                           "pose_median_deg", "pose_max_deg"}
    assert len(report["psnr_per_view"]) == 2
    assert report["pose_median_deg"] < 1e-5  # baseline mode uses ground truth


def test_config_file_and_flag_precedence(cli_dataset, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps = 4\nbatch = 32\n# comment\nn-coarse = 8\nn-fine = 8\n")
    out = tmp_path / "run"
    rc = run_cli("train", "--mode", "baseline", "--data", cli_dataset,
                 "--out", str(out), "--config", str(cfg), "--batch", "48")
    assert rc == 0
    resolved = (out / "resolved_config.txt").read_text()
    assert "steps = 4" in resolved          # from file
    assert "batch = 48" in resolved         # flag wins
    assert "n-coarse = 8" in resolved
    tc = json.load(open(out / "train_config.json"))
    assert tc["total_steps"] == 4 and tc["batch_rays"] == 48


def test_config_file_unknown_key_rejected(cli_dataset, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus-key = 1\n")
    rc = run_cli("train", "--mode", "baseline", "--data", cli_dataset,
                 "--out", str(tmp_path / "r"), "--config", str(cfg))
    assert rc == 1


def test_run_dir_self_describing(cli_run, cli_dataset, tmp_path):
    # eval works from the run directory + dataset alone
    rc = run_cli("eval", "--run", cli_run, "--data", cli_dataset,
                 "--out", str(tmp_path / "r.json"), "--n-coarse", "8", "--n-fine", "8")
    assert rc == 0


def test_indep_run_records_perturbed_priors(cli_dataset, tmp_path):
    from spinrecon import geometry as geo
    from spinrecon.synthdata import load_manifest
    from spinrecon.trainer import load_run

    out = tmp_path / "indep_run"
    rc = run_cli("train", "--mode", "indep", "--data", cli_dataset,
                 "--out", str(out), "--steps", "4", "--batch", "32",
                 "--n-coarse", "8", "--n-fine", "8",
                 "--perturb-mean", "8", "--perturb-std", "2",
                 "--perturb-seed", "1")
    assert rc == 0
    params, model, meta = load_run(str(out / "checkpoint.bin"))
    man = load_manifest(cli_dataset)
    gt = man.gt_rotations()[man.indices("train")]
    angles = [geo.angular_distance(model.priors[i], gt[i])
              for i in range(1, model.n)]
    assert 4.0 < np.mean(angles) < 12.0      # priors carry the perturbation
    assert geo.angular_distance(model.priors[0], gt[0]) < 1e-9  # anchor exact
    resolved = (out / "resolved_config.txt").read_text()
    assert "perturb-mean = 8" in resolved
