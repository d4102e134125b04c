import functools
import logging
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app import main as commands
from app.config import load_run_config, model_config, noise_config, train_config
from app.services import data, evalbench, pipeline, rigid
from app.services.cloud import PointCloud
from app.services.errors import EvalError, PartitionError

TINY = pipeline.ModelConfig(n_regions=2, embed_dim=8, attention_layers=1, seed=2)


def _samples(count=3, n_points=32, seed=0):
    return data.build_dataset(count, seed, kinds=("box", "cylinder"), points_per_shape=n_points,
                              negative_samples=16)


def _oracle(sample):
    return sample.gt_transform


def _grid():
    axis = np.arange(3.0)
    x, y, z = np.meshgrid(axis, 1.3 * axis, 1.7 * axis, indexing="ij")
    return PointCloud(np.column_stack([x.ravel(), y.ravel(), z.ravel()]))


def test_ground_truth_predictor_has_zero_error():
    rows = evalbench.evaluate_predictors({"Oracle": _oracle}, _samples(), ["clean"], seed=1)
    (row,) = rows
    assert (row.mse_r, row.mae_r, row.mse_t, row.mae_t, row.geodesic_deg) == (0.0, 0.0, 0.0, 0.0, 0.0)
    assert row.chamfer == pytest.approx(0.0, abs=1e-24)
    assert row.pairs == 3 and row.seed == 1


def test_rmse_is_root_of_mse():
    samples = _samples()
    predictions = [rigid.from_euler([5.0 * i, 2.0, -1.0], [0.1, 0.0, 0.2 * i]) for i in range(3)]
    row = evalbench.aggregate("Fixed", "clean", predictions, samples, seed=0)
    assert row.rmse_r ** 2 == pytest.approx(row.mse_r, abs=1e-9)
    assert row.rmse_t ** 2 == pytest.approx(row.mse_t, abs=1e-9)
    expected = np.mean([rigid.rotation_errors(p, s.gt_transform).mae_euler_deg for p, s in zip(predictions, samples)])
    assert row.mae_r == pytest.approx(expected, abs=1e-12)


def test_aggregate_needs_pairs():
    with pytest.raises(EvalError):
        evalbench.aggregate("Empty", "clean", [], [], seed=0)


def test_rows_follow_noise_order_then_predictor_order():
    predictors = {"Oracle": _oracle, "Identity": lambda s: rigid.identity()}
    rows = evalbench.evaluate_predictors(predictors, _samples(2), ["do", "clean", "di"], seed=3)
    assert [(r.noise, r.model) for r in rows] == [
        ("clean", "Oracle"), ("clean", "Identity"),
        ("di", "Oracle"), ("di", "Identity"),
        ("do", "Oracle"), ("do", "Identity"),
    ]
    # noise never touches the ground truth
    assert all(r.mse_r == 0.0 for r in rows if r.model == "Oracle")


def test_unknown_noise_kind_is_rejected():
    with pytest.raises(EvalError):
        evalbench.evaluate_predictors({"Oracle": _oracle}, _samples(1), ["blur"], seed=0)


def test_empty_evaluation_set_is_rejected():
    with pytest.raises(EvalError):
        evalbench.evaluate_predictors({"Oracle": _oracle}, [], ["clean"], seed=0)


def test_threaded_evaluation_matches_serial():
    samples = _samples(4)
    params = pipeline.init_params(TINY)
    serial = evalbench.evaluate(params, samples, ["clean", "pd"], seed=5)
    threaded = evalbench.evaluate(params, samples, ["clean", "pd"], seed=5, threads=3)
    assert serial == threaded


def test_icp_on_identical_clouds_returns_identity():
    cloud = _grid()
    result = evalbench.icp_baseline(cloud, cloud)
    assert result.converged and not result.local_minimum
    assert_allclose(result.transform.as_vector(), [1, 0, 0, 0, 0, 0, 0], atol=1e-12)


def test_icp_recovers_a_pure_translation():
    cloud = _grid()
    shift = rigid.from_euler([0.0, 0.0, 0.0], [0.1, 0.0, 0.0])
    result = evalbench.icp_baseline(cloud, rigid.apply(shift, cloud))
    assert result.converged
    assert_allclose(result.transform.t, [0.1, 0.0, 0.0], atol=1e-6)
    assert rigid.geodesic_deg(result.transform, rigid.identity()) < 1e-6


def test_icp_residuals_never_increase():
    cloud, _ = data.generate_shape(data.ShapeSpec("box", size=(0.4, 0.25, 0.1), n_points=200), seed=4)
    moved = rigid.apply(rigid.from_euler([20.0, 10.0, 5.0], [0.05, -0.02, 0.03]), cloud)
    residuals = evalbench.icp_baseline(cloud, moved, max_iter=30).residuals
    assert all(b <= a + 1e-12 for a, b in zip(residuals, residuals[1:]))


def test_icp_flags_a_stalled_fit():
    inner, _ = data.generate_shape(data.ShapeSpec("sphere", n_points=200), seed=5)
    outer = PointCloud(2.0 * inner.points)
    result = evalbench.icp_baseline(inner, outer, max_iter=100, tol=1e-4)
    assert result.converged
    assert result.local_minimum
    assert min(result.residuals) > evalbench.STALL_RESIDUAL


def test_icp_warns_when_iterations_run_out(caplog):
    cloud = _grid()
    moved = rigid.apply(rigid.from_euler([10.0, 0.0, 0.0], [0.1, 0.0, 0.0]), cloud)
    with caplog.at_level(logging.WARNING):
        result = evalbench.icp_baseline(cloud, moved, max_iter=1)
    assert not result.converged and result.iterations == 1
    assert "no convergence" in caplog.text


def test_bench_reports_model_and_icp_rows():
    rows = evalbench.bench(pipeline.init_params(TINY), _samples(2), ["clean", "pd"], seed=1, icp_max_iter=10)
    assert [(r.noise, r.model) for r in rows] == [
        ("clean", "RegionReg"), ("clean", "ICP"), ("pd", "RegionReg"), ("pd", "ICP"),
    ]
    assert all(r.pairs == 2 for r in rows)


def test_ablation_trains_three_variants():
    train_samples, eval_samples = _samples(2, seed=1), _samples(2, seed=2)
    config = pipeline.TrainConfig(epochs=1, batch_size=2, seed=1)
    rows = evalbench.ablate(train_samples, eval_samples, replace(TINY, n_regions=1), config, seed=1)
    assert [r.model for r in rows] == ["ModelA", "ModelB", "ModelC"]
    assert all(r.noise == "clean" for r in rows)


def test_ablation_rerun_with_the_same_seed_is_bit_exact():
    train_samples, eval_samples = _samples(2, seed=1), _samples(2, seed=2)
    config = pipeline.TrainConfig(epochs=2, batch_size=2, seed=5)
    first = evalbench.ablate(train_samples, eval_samples, replace(TINY, n_regions=1), config, seed=5)
    again = evalbench.ablate(train_samples, eval_samples, replace(TINY, n_regions=1), config, seed=5)
    assert first == again


def test_csv_header_and_round_trip(tmp_path):
    rows = evalbench.evaluate_predictors({"Oracle": _oracle, "Identity": lambda s: rigid.identity()},
                                         _samples(2), ["clean"], seed=7)
    path = tmp_path / "report.csv"
    evalbench.write_csv(path, rows)
    assert path.read_text().splitlines()[0] == (
        "model,noise,mse_r,rmse_r,mae_r,mse_t,rmse_t,mae_t,geodesic_deg,chamfer,pairs,seed"
    )
    assert evalbench.read_csv(path) == rows


def test_read_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("model,noise,mae\nA,clean,1.0\n")
    with pytest.raises(EvalError, match="header"):
        evalbench.read_csv(path)


def test_text_table_parses_back_to_six_digits():
    rows = evalbench.evaluate_predictors({"Identity": lambda s: rigid.identity()}, _samples(2), ["clean"], seed=8)
    (parsed,) = evalbench.parse_table(evalbench.format_table(rows))
    (row,) = rows
    assert parsed["model"] == "Identity" and parsed["noise"] == "clean"
    assert parsed["mae_r"] == pytest.approx(row.mae_r, rel=1e-5)
    assert parsed["pairs"] == 2.0


def test_ablation_columns_table():
    row = evalbench.EvalRow("ModelC", "clean", 4.0, 2.0, 1.5, 0.25, 0.5, 0.25, 3.0, 0.01, 5, 1)
    text = evalbench.format_table([row], columns=("model",) + evalbench.ABLATION_COLUMNS)
    assert text.splitlines() == ["model   rmse_r  mae_r  rmse_t  mae_t", "ModelC  2       1.5    0.5     0.25"]


def test_text_report_loads_back_as_rows(tmp_path):
    rows = evalbench.evaluate_predictors({"Oracle": _oracle, "Identity": lambda s: rigid.identity()},
                                         _samples(2), ["clean", "pd"], seed=9)
    path = tmp_path / "report.txt"
    evalbench.write_table(path, rows)
    loaded = evalbench.load_report(path)
    assert [(r.model, r.noise, r.pairs, r.seed) for r in loaded] == [(r.model, r.noise, r.pairs, r.seed) for r in rows]
    for got, want in zip(loaded, rows):
        assert got.mae_r == pytest.approx(want.mae_r, rel=1e-5, abs=1e-12)
        assert got.geodesic_deg == pytest.approx(want.geodesic_deg, rel=1e-5, abs=1e-12)
    csv_path = tmp_path / "report.csv"
    evalbench.write_csv(csv_path, rows)
    assert evalbench.load_report(csv_path) == rows


def test_text_report_with_foreign_columns_is_rejected(tmp_path):
    row = evalbench.EvalRow("ModelC", "clean", 4.0, 2.0, 1.5, 0.25, 0.5, 0.25, 3.0, 0.01, 5, 1)
    path = tmp_path / "ablation.txt"
    path.write_text(evalbench.format_table([row], columns=("model",) + evalbench.ABLATION_COLUMNS))
    with pytest.raises(EvalError, match="header"):
        evalbench.load_report(path)


def test_malformed_table_cells_are_reported_with_line():
    text = "model noise mae_r\nA clean 1.5\nB clean n/a\n"
    with pytest.raises(EvalError, match="line 3"):
        evalbench.parse_table(text)
    with pytest.raises(EvalError, match="line 2"):
        evalbench.parse_table("model noise mae_r\nA clean\n")


def test_degenerate_partition_predicts_identity(monkeypatch, caplog):
    def broken(*_):
        raise PartitionError("degenerate partition: no region is occupied in both shapes")

    monkeypatch.setattr(evalbench, "register", broken)
    with caplog.at_level(logging.WARNING):
        (row,) = evalbench.evaluate(pipeline.init_params(TINY), _samples(1), ["clean"], seed=0)
    expected = evalbench.aggregate("RegionReg", "clean", [rigid.identity()], _samples(1), seed=0)
    assert row == expected
    assert "predicting the identity" in caplog.text


# --- desk-scale acceptance runs (deselected by default) ---

DESK_SEEDS = (1, 2, 3)


@functools.lru_cache(maxsize=None)
def _desk_run(seed):
    """Default run config: 200 pairs of 256 points, 300 epochs."""
    config = load_run_config(None, {"seed": seed, "threads": 4})
    dataset = [s.training_view() for s in commands.training_samples(config)]
    trained = pipeline.train(dataset, train_config(config), model_config=model_config(config)).params
    return config, trained


def _clean_row(params, config):
    (row,) = evalbench.evaluate(params, commands.evaluation_samples(config), ["clean"], config['seed'],
                                noise_config(config), config['threads'])
    return row


@pytest.mark.slow
def test_desk_scale_training_is_accurate_in_most_seeds():
    passing = 0
    for seed in DESK_SEEDS:
        config, trained = _desk_run(seed)
        after = _clean_row(trained, config)
        before = _clean_row(pipeline.init_params(model_config(config)), config)
        passing += (after.geodesic_deg < 5.0 and after.mae_t < 0.05
                    and 5 * after.geodesic_deg <= before.geodesic_deg and 5 * after.mae_t <= before.mae_t)
    assert passing >= 2


@pytest.mark.slow
def test_trained_network_maps_a_shape_onto_itself():
    config, trained = _desk_run(1)
    for sample in commands.evaluation_samples(config)[:5]:
        T = pipeline.register(sample.source, sample.source, trained).transform
        assert rigid.geodesic_deg(T, rigid.identity()) < 5.0


@pytest.mark.slow
def test_point_drift_degrades_rotation_error_by_a_bounded_factor():
    config, trained = _desk_run(1)
    rows = evalbench.bench(trained, commands.evaluation_samples(config), evalbench.NOISE_ORDER, config['seed'],
                           noise_config(config), config['threads'])
    model_rows = [r for r in rows if r.model == "RegionReg"]
    assert [r.noise for r in model_rows] == ["clean", "di", "pd", "do"]
    by_noise = {r.noise: r for r in model_rows}
    assert by_noise["pd"].mae_r < 4 * by_noise["clean"].mae_r


@pytest.mark.slow
def test_full_model_is_no_worse_than_single_region_model_in_most_seeds():
    wins = 0
    for seed in DESK_SEEDS:
        config = load_run_config(None, {"seed": seed, "threads": 4, "train_pairs": 100, "epochs": 100,
                                        "eval_pairs": 32})
        rows = evalbench.ablate(commands.training_samples(config), commands.evaluation_samples(config),
                                model_config(config), train_config(config), seed, noise_config=noise_config(config))
        by_model = {r.model: r for r in rows}
        wins += by_model["ModelC"].rmse_r <= by_model["ModelA"].rmse_r
    assert wins >= 2
