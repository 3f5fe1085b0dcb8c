import csv

import pytest

from dcmil.cli import run

SMALL = """\
S = 2
tile_side = 32
token_dim = 8
n_heads = 2
n_blocks = 1
N_B = 3
D = 6
D_B = 5
D_hat = 4
aggregator_hidden = 4
epochs_pretrain = 1
epochs_joint = 1
epochs_c2 = 1
k_folds = 3
mc_passes = 3
synthetic.n_patients = 18
synthetic.n_normals = 3
synthetic.instances_per_bag = 2,4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("DCMIL_RUN_DIR", str(root))
        yield root


def cli(workspace, *args):
    return run([*args[:1], "--config", str(workspace / "small.cfg"), *args[1:]])


def test_generate_data_writes_manifest_and_tiles(workspace):
    assert cli(workspace, "generate-data") == 0
    data = workspace / "data"
    with open(data / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["source"] for r in rows} == {"tumor", "normal"}
    assert len({r["patient_id"] for r in rows}) == 21
    assert len(list(data.rglob("*.png"))) == 2 * len(rows)


def test_generate_data_is_idempotent(workspace):
    manifest = workspace / "data" / "manifest.csv"
    first = manifest.read_bytes()
    assert cli(workspace, "generate-data") == 0
    assert manifest.read_bytes() == first


def test_evaluate_without_checkpoints_fails_cleanly(workspace, capsys):
    assert cli(workspace, "evaluate", "--out", str(workspace / "empty")) == 1
    assert "FileNotFoundError" in capsys.readouterr().err


def test_unknown_flag_prints_usage(capsys):
    assert run(["train-c1", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_fold_out_of_range_rejected(workspace, capsys):
    assert cli(workspace, "train-c1", "--fold", "7", "--out", str(workspace / "bad")) == 1
    assert "--fold" in capsys.readouterr().err


def test_staged_pipeline_then_report(workspace):
    out = str(workspace / "staged")
    for cmd in ("train-c1", "train-c2", "evaluate", "report"):
        assert cli(workspace, cmd, "--out", out) == 0, cmd
    staged = workspace / "staged"
    assert (staged / "plots" / "km.png").stat().st_size > 0
    assert list((staged / "plots" / "indicators").glob("*.png"))
    with open(staged / "plots" / "ci_table.csv") as fh:
        folds = [r["fold"] for r in csv.DictReader(fh)]
    assert folds == ["0", "1", "2", "mean", "std", "pooled"]
    assert list((staged / "exports" / "saliency").rglob("*.png"))


def test_uncertainty_and_normal_comparison(workspace):
    out = str(workspace / "staged")
    assert cli(workspace, "uncertainty", "--out", out, "--fold", "0") == 0
    assert cli(workspace, "compare-normal", "--out", out, "--fold", "0") == 0
    staged = workspace / "staged"
    assert (staged / "uncertainty" / "fold_0_uncertainty.csv").exists()
    with open(staged / "compare_normal" / "fold_0_distances.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["distance"]) >= 0 for r in rows)


def test_crossval_is_idempotent(workspace):
    a, b = workspace / "cv_a", workspace / "cv_b"
    assert cli(workspace, "crossval", "--out", str(a)) == 0
    assert cli(workspace, "crossval", "--out", str(b)) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "exports" / "predictions.csv").read_bytes() == (b / "exports" / "predictions.csv").read_bytes()
