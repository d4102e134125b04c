import csv

import numpy as np
import pytest

import run
from app.config import load_run_config, model_config
from app.services import data, evalbench, pipeline, rigid
from app.services.cloud import load_cloud, save_cloud

SMALL_RUN = ["--n-regions", "2", "--embed-dim", "8", "--attention-layers", "1",
             "--points-per-shape", "32", "--negative-samples", "16", "--train-pairs", "2", "--eval-pairs", "2"]


def _run(tmp_path, *argv):
    return run.cli(list(argv) + SMALL_RUN + ["--output-dir", str(tmp_path / "out")])


def _arrays(params):
    return {name: t.data for name, t in params.named_tensors().items()}


@pytest.fixture
def clouds(tmp_path):
    cloud, _ = data.generate_shape(data.ShapeSpec("box", size=(0.4, 0.3, 0.2), n_points=40), seed=3)
    path = tmp_path / "source.xyz"
    save_cloud(path, cloud)
    return path


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "init.ckpt"
    pipeline.save_checkpoint(path, pipeline.init_params(pipeline.ModelConfig(n_regions=2, embed_dim=8,
                                                                             attention_layers=1)))
    return path


def test_zero_epoch_training_writes_the_initialisation(tmp_path):
    assert _run(tmp_path, "train", "--epochs", "0") == run.EXIT_OK
    out = tmp_path / "out"
    saved = pipeline.load_checkpoint(out / "model.ckpt")
    expected = pipeline.init_params(model_config(load_run_config(None, {"n_regions": 2, "embed_dim": 8,
                                                                        "attention_layers": 1})))
    for name, array in _arrays(expected).items():
        assert _arrays(saved)[name].tobytes() == array.tobytes()
    assert (out / "loss_trace.csv").read_text() == "epoch,loss,alignment,reconstruction\n"
    assert (out / "config.effective.yaml").exists()


def test_register_with_identity_network_prints_identity(tmp_path, capsys, clouds, checkpoint):
    aligned = tmp_path / "aligned.xyz"
    code = run.cli(["register", "--source", str(clouds), "--target", str(clouds), "--checkpoint", str(checkpoint),
                    "--output", str(aligned), "--output-dir", str(tmp_path / "out")])
    assert code == run.EXIT_OK
    printed = [float(v) for v in capsys.readouterr().out.split()]
    assert printed == pytest.approx([1, 0, 0, 0, 0, 0, 0], abs=1e-12)
    np.testing.assert_allclose(load_cloud(aligned).points, load_cloud(clouds).points, atol=1e-8)


def test_register_prints_one_line_for_a_full_precision_transform(tmp_path, capsys, clouds):
    expected = rigid.from_euler([12.35, -7.65, 3.14], [0.123456789, -0.234567891, 0.0345678912])
    params = pipeline.init_params(pipeline.ModelConfig(n_regions=2, embed_dim=8, attention_layers=1))
    for branch in params.decoder.branches:
        branch.b2.data = expected.as_vector()
    path = tmp_path / "offset.ckpt"
    pipeline.save_checkpoint(path, params)

    code = run.cli(["register", "--source", str(clouds), "--target", str(clouds), "--checkpoint", str(path),
                    "--output-dir", str(tmp_path / "out")])
    assert code == run.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    assert [float(v) for v in lines[0].split()] == pytest.approx(expected.as_vector().tolist(), abs=1e-8)


def test_eval_with_a_single_noise_kind(tmp_path):
    assert _run(tmp_path, "eval", "--train", "--epochs", "0", "--noise", "pd") == run.EXIT_OK
    with open(tmp_path / "out" / "report.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["noise"] for r in rows] == ["pd"]
    assert rows[0]["model"] == "RegionReg" and rows[0]["pairs"] == "2"


def test_bench_writes_icp_rows_and_samples(tmp_path, checkpoint):
    code = _run(tmp_path, "bench", "--checkpoint", str(checkpoint), "--export-samples", "1", "--icp-max-iter", "5")
    assert code == run.EXIT_OK
    out = tmp_path / "out"
    with open(out / "bench.csv", newline="") as f:
        rows = [(r["noise"], r["model"]) for r in csv.DictReader(f)]
    assert rows == [(noise, model) for noise in ("clean", "di", "pd", "do") for model in ("RegionReg", "ICP")]
    assert (out / "samples" / "do_000_aligned.ply").exists()


def test_partition_export_labels_every_point(tmp_path, clouds, checkpoint):
    output = tmp_path / "regions.ply"
    code = run.cli(["partition-export", "--source", str(clouds), "--checkpoint", str(checkpoint),
                    "--output", str(output), "--output-dir", str(tmp_path / "out")])
    assert code == run.EXIT_OK
    cloud, labels = load_cloud(output, with_labels=True)
    assert len(labels) == len(cloud) == 40
    assert set(labels.tolist()) <= {0, 1}


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as excinfo:
        run.cli(["train", "--help"])
    assert excinfo.value.code == 0
    text = capsys.readouterr().out
    assert "--n-regions" in text and "(default: 8)" in text
    assert "--no-position-encoding" in text


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--epochs", "ten"],
    ["register", "--source", "a.xyz"],
])
def test_usage_errors_exit_with_one(argv):
    assert run.cli(argv) == run.EXIT_USAGE


def test_config_errors_exit_with_one(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("n_region: 4\n")
    assert run.cli(["train", "--config", str(bad), "--output-dir", str(tmp_path / "out")]) == run.EXIT_USAGE
    assert _run(tmp_path, "eval") == run.EXIT_USAGE
    assert _run(tmp_path, "train", "--epochs", "-1") == run.EXIT_USAGE


def test_runtime_errors_exit_with_two(tmp_path, clouds):
    missing = tmp_path / "missing.ckpt"
    code = run.cli(["register", "--source", str(clouds), "--target", str(clouds), "--checkpoint", str(missing),
                    "--output-dir", str(tmp_path / "out")])
    assert code == run.EXIT_RUNTIME
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a zip archive")
    code = run.cli(["register", "--source", str(clouds), "--target", str(clouds), "--checkpoint", str(garbage),
                    "--output-dir", str(tmp_path / "out")])
    assert code == run.EXIT_RUNTIME


def test_file_backed_pairs_feed_training_and_evaluation(tmp_path):
    paths = []
    specs = [data.ShapeSpec("box", size=(0.4, 0.3, 0.2), n_points=30), data.ShapeSpec("sphere", n_points=30)]
    for i, spec in enumerate(specs):
        cloud, _ = data.generate_shape(spec, seed=20 + i)
        paths.append(tmp_path / f"{spec.kind}.xyz")
        save_cloud(paths[-1], cloud)
    files = ",".join(str(p) for p in paths)
    code = run.cli(["eval", "--train", "--epochs", "1", "--noise", "clean", "--n-regions", "1",
                    "--embed-dim", "8", "--attention-layers", "1", "--train-files", files,
                    "--eval-files", str(paths[0]), "--output-dir", str(tmp_path / "out")])
    assert code == run.EXIT_OK
    out = tmp_path / "out"
    with open(out / "loss_trace.csv", newline="") as f:
        (epoch,) = list(csv.DictReader(f))
    # file clouds carry no occupancy labels
    assert float(epoch["reconstruction"]) == 0.0
    with open(out / "report.csv", newline="") as f:
        (row,) = list(csv.DictReader(f))
    assert row["pairs"] == "1"


def test_report_command_renders_saved_reports(tmp_path, monkeypatch, checkpoint):
    assert _run(tmp_path, "eval", "--checkpoint", str(checkpoint), "--noise", "clean") == run.EXIT_OK
    out = tmp_path / "out"
    shown = []
    monkeypatch.setattr(evalbench, "print_report", lambda rows, title="", **_: shown.append((title, rows)))
    for name in ("report.csv", "report.txt"):
        assert run.cli(["report", "--input", str(out / name)]) == run.EXIT_OK
    assert [title for title, _ in shown] == ["report.csv", "report.txt"]
    assert [(r.model, r.noise, r.pairs) for _, rows in shown for r in rows] == [("RegionReg", "clean", 2)] * 2
    assert run.cli(["report", "--input", str(out / "missing.csv")]) == run.EXIT_RUNTIME
