import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stitchnet import classifier, pipeline
from stitchnet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from stitchnet.volume import read_pgm

SMALL_CONFIG = """\
[paths]
data_dir = "cohort"
output_dir = "out"

[synth]
n = 24
seed = 5
dims = [16, 16, 8]

[classifier]
input_size = 32
epochs = 2
batch_size = 4
folds = 3
test_size = 6

[regressor]
epochs = 5
hidden_units = 4

[analysis]
class = "below"
"""

STAGES = ["synth", "stitch", "train-classifier", "extract-features", "evaluate", "saliency", "analyze"]


def run_all(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.toml"
    cfg.write_text(SMALL_CONFIG, encoding="utf-8")
    codes = {}
    for stage in STAGES:
        args = [stage, "--config", str(cfg)]
        if stage == "synth":
            args += ["--out", str(root / "cohort")]
        codes[stage] = main(args)
    codes["model-summary"] = main(["model-summary", "--config", str(cfg)])
    return codes


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    codes = run_all(root)
    return root, codes


def test_every_command_succeeds(pipeline_run):
    _, codes = pipeline_run
    assert codes == {k: EXIT_OK for k in codes}


def test_outputs_exist(pipeline_run):
    root, _ = pipeline_run
    out = root / "out"
    for rel in ("classifier.snet", "cv_accuracy.csv", "split.csv", "features.csv", "evaluation.csv",
                "pca.csv", "dcor.csv", "mosaics/layout.csv", "mosaics/sub-0000.pgm"):
        assert (out / rel).exists(), rel
    for view in ("mosaic", "axial", "sagittal", "coronal"):
        img = read_pgm(out / "saliency" / f"below_{view}.pgm")
        assert img.ndim == 2 and img.dtype == np.uint8 and img.max() == 255
    cohort = root / "cohort"
    assert len(list((cohort / "volumes").glob("*.raw"))) == 24
    assert (cohort / "subjects.csv").exists() and (cohort / "ground_truth.csv").exists()


def test_csv_schemas(pipeline_run):
    out = pipeline_run[0] / "out"
    cv = (out / "cv_accuracy.csv").read_text().splitlines()
    assert cv[0] == "fold,accuracy,n" and [l.split(",")[0] for l in cv[1:]] == [
        "fold1", "fold2", "fold3", "mean", "holdout"]
    ev = (out / "evaluation.csv").read_text().splitlines()
    assert ev[0].startswith("feature_set,r_squared,pearson_r")
    assert ev[1].startswith("baseline,")
    for line in ev[1:]:
        assert -1 <= float(line.split(",")[2]) <= 1
    pca = (out / "pca.csv").read_text().splitlines()
    assert pca[0] == "subject_id,label,pc1,pc2" and len(pca) == 25
    for line in (out / "dcor.csv").read_text().splitlines()[1:]:
        assert 0 <= float(line.split(",")[1]) <= 1


def test_checkpoint_reload_predictions(pipeline_run):
    root, _ = pipeline_run
    cfg = pipeline.load_config(root / "config.toml")
    model = pipeline.load_model(cfg.output_dir)
    cohort = pipeline.load_cohort(cfg.data_dir)
    X = pipeline.model_inputs(model, cohort)
    again = classifier.load_checkpoint(cfg.output_dir / "classifier.snet")
    np.testing.assert_array_equal(classifier.logits(model, X), classifier.logits(again, X))
    assert model.preprocessing["layout"] == cohort.layout.to_dict()


def test_rerun_is_byte_identical(pipeline_run, tmp_path):
    root, _ = pipeline_run
    codes = run_all(tmp_path / "again")
    assert set(codes.values()) == {EXIT_OK}
    first, second = tree_bytes(root), tree_bytes(tmp_path / "again")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name


def test_predict_prints_rows(pipeline_run, capsys):
    root, _ = pipeline_run
    vols = [str(root / "cohort" / "volumes" / f"sub-000{i}.raw") for i in range(2)]
    assert main(["predict", "--checkpoint", str(root / "out" / "classifier.snet")] + vols) == EXIT_OK
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 2
    path, p, z, label = rows[0].split("\t")
    assert path == vols[0] and 0 <= float(p) <= 1 and label == ("above" if float(z) >= 0 else "below")


def test_model_summary_reports_params(capsys):
    assert main(["model-summary"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "trainable parameters: 547" in out and "64" in out


def test_saliency_class_override(pipeline_run, capsys):
    root, _ = pipeline_run
    assert main(["saliency", "--config", str(root / "config.toml"), "--class", "above"]) == EXIT_OK
    assert (root / "out" / "saliency" / "above_axial.pgm").exists()


# --- exit codes ----------------------------------------------------------------


def test_synth_needs_two_subjects(tmp_path, capsys):
    assert main(["synth", "--n", "1", "--out", str(tmp_path / "c")]) == EXIT_USAGE
    assert "need ≥ 2 subjects" in capsys.readouterr().err


def test_bad_arguments_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n", "many"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE


def test_bad_class_choice_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["saliency", "--class", "middle"])
    assert exc.value.code == EXIT_USAGE


def test_missing_config_exit_1(tmp_path):
    assert main(["stitch", "--config", str(tmp_path / "nope.toml")]) == EXIT_USAGE


def test_unknown_config_key_exit_1(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[classifier]\nwidth = 3\n")
    assert main(["stitch", "--config", str(cfg)]) == EXIT_USAGE


def test_bad_log_level_exit_1(monkeypatch, tmp_path):
    monkeypatch.setenv("STITCHNET_LOG", "chatty")
    assert main(["synth", "--n", "2", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_cohort_exit_2(tmp_path):
    assert main(["stitch", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_missing_checkpoint_exit_2(pipeline_run, tmp_path):
    root, _ = pipeline_run
    assert main(["evaluate", "--data", str(root / "cohort"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["predict", "--checkpoint", str(tmp_path / "x.snet"),
                 str(root / "cohort" / "volumes" / "sub-0000.raw")]) == EXIT_DATA


def test_corrupt_checkpoint_exit_2(pipeline_run, tmp_path):
    root, _ = pipeline_run
    bad = tmp_path / "bad.snet"
    raw = (root / "out" / "classifier.snet").read_bytes()
    bad.write_bytes(raw[: len(raw) // 2])
    assert main(["model-summary", "--checkpoint", str(bad)]) == EXIT_DATA


def test_analyze_without_ground_truth_exit_2(pipeline_run, tmp_path):
    root, _ = pipeline_run
    cohort = tmp_path / "cohort"
    shutil.copytree(root / "cohort", cohort)
    (cohort / "tissue_fractions.csv").unlink()
    out = tmp_path / "out"
    shutil.copytree(root / "out", out)
    assert main(["analyze", "--data", str(cohort), "--out", str(out)]) == EXIT_DATA


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stitchnet", "synth", "--n", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "need ≥ 2 subjects" in proc.stderr
