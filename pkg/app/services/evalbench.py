# ==============================================================================
# Evaluation harness: DCP-style rotation / translation errors per noise
# section, the point-to-point ICP baseline, the three-model ablation, and the
# CSV / aligned-text / rich renderings of the resulting report.
# ==============================================================================

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields, replace
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.table import Table

from app.services import rigid
from app.services.cloud import KdTree, chamfer_value
from app.services.data import CLEAN, NOISE_KINDS, NoiseConfig, child_seed, inject_noise
from app.services.errors import EvalError, PartitionError
from app.services.pipeline import register, train

CSV_HEADER = ("model", "noise", "mse_r", "rmse_r", "mae_r", "mse_t", "rmse_t", "mae_t",
              "geodesic_deg", "chamfer", "pairs", "seed")
NOISE_ORDER = (CLEAN,) + NOISE_KINDS
ABLATION_COLUMNS = ("rmse_r", "mae_r", "rmse_t", "mae_t")
# ModelA: one decoder conditioned on the whole shape; ModelB: regions without
# position encoding; ModelC: the full network.
ABLATION_VARIANTS = {
    "ModelA": {"n_regions": 1, "position_encoding": False},
    "ModelB": {"position_encoding": False},
    "ModelC": {},
}
STALL_RESIDUAL = 1e-4

console = Console()


@dataclass(frozen=True)
class EvalRow:
    model: str
    noise: str
    mse_r: float
    rmse_r: float
    mae_r: float
    mse_t: float
    rmse_t: float
    mae_t: float
    geodesic_deg: float
    chamfer: float
    pairs: int
    seed: int


_ROW_TYPES = {f.name: f.type for f in fields(EvalRow)}


def aggregate(model, noise, predictions, samples, seed):
    """Means over pairs; MSE(R) averages the squared Euler differences over the three axes."""
    if not samples:
        raise EvalError(f"[Model {model}] no pairs to aggregate for noise {noise!r}")
    rotation = [rigid.rotation_errors(pred, s.gt_transform) for pred, s in zip(predictions, samples)]
    translation = [rigid.translation_errors(pred, s.gt_transform) for pred, s in zip(predictions, samples)]
    chamfers = [chamfer_value(rigid.apply(pred, s.source), s.target) for pred, s in zip(predictions, samples)]
    if any(r.gimbal_lock for r in rotation):
        logging.warning(f"[Model {model}] Euler errors near gimbal lock in noise section {noise!r}")
    mse_r = float(np.mean([r.mse_euler_deg for r in rotation]))
    mse_t = float(np.mean([t.mse for t in translation]))
    return EvalRow(
        model=model, noise=noise,
        mse_r=mse_r, rmse_r=float(np.sqrt(mse_r)), mae_r=float(np.mean([r.mae_euler_deg for r in rotation])),
        mse_t=mse_t, rmse_t=float(np.sqrt(mse_t)), mae_t=float(np.mean([t.mae for t in translation])),
        geodesic_deg=float(np.mean([r.geodesic_deg for r in rotation])),
        chamfer=float(np.mean(chamfers)), pairs=len(samples), seed=int(seed),
    )


def ordered_noise_kinds(noise_kinds):
    unknown = [k for k in noise_kinds if k not in NOISE_ORDER]
    if unknown:
        raise EvalError(f"unknown noise kinds {unknown}; expected a subset of {NOISE_ORDER}")
    return [k for k in NOISE_ORDER if k in noise_kinds]


def noisy_samples(samples, kind, seed, noise_config=NoiseConfig()):
    return [inject_noise(s, kind, child_seed(seed, i), noise_config) for i, s in enumerate(samples)]


def evaluate_predictors(predictors, samples, noise_kinds, seed, noise_config=NoiseConfig(), threads=1):
    """Rows grouped by noise section (clean, di, pd, do), predictors in the given order within each."""
    samples = list(samples)
    if not samples:
        raise EvalError("evaluation dataset is empty")
    rows = []
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="Worker") as executor:
        for kind in ordered_noise_kinds(noise_kinds):
            noisy = noisy_samples(samples, kind, seed, noise_config)
            for model, predict in predictors.items():
                logging.info(f"[Noise {kind}] [Model {model}] registering {len(noisy)} pairs")
                predictions = list(executor.map(predict, noisy))
                rows.append(aggregate(model, kind, predictions, noisy, seed))
    return rows


def model_predictor(params):
    def predict(sample):
        try:
            return register(sample.source, sample.target, params).transform
        except PartitionError as e:
            logging.warning(f"[Eval] {e}; predicting the identity")
            return rigid.identity()
    return predict


def evaluate(params, samples, noise_kinds=NOISE_ORDER, seed=1, noise_config=NoiseConfig(), threads=1,
             model_name="RegionReg"):
    return evaluate_predictors({model_name: model_predictor(params)}, samples, noise_kinds, seed,
                               noise_config, threads)


# --- ICP baseline ---

@dataclass
class IcpResult:
    transform: rigid.RigidTransform
    converged: bool
    local_minimum: bool
    iterations: int
    residuals: list


def best_fit_transform(A, B):
    """Least-squares rotation and translation mapping rows of A onto rows of B (SVD, det +1)."""
    centroid_a, centroid_b = A.mean(axis=0), B.mean(axis=0)
    H = (A - centroid_a).T @ (B - centroid_b)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[-1, :] *= -1
        R = Vt.T @ U.T
    return R, centroid_b - R @ centroid_a


def icp_baseline(S, G, max_iter=50, tol=1e-6):
    """Point-to-point ICP from the identity; residual is the mean squared correspondence distance.

    Returns the best iterate. `local_minimum` flags a stall above a near-zero residual.
    """
    source = S.points
    target = G.points
    tree = KdTree(G)
    T = rigid.identity()
    best, best_residual = T, np.inf
    residuals, converged = [], False
    for _ in range(max_iter):
        d2, idx = tree.nearest(rigid.apply_points(T, source))
        residual = float(np.mean(d2))
        residuals.append(residual)
        if residual < best_residual:
            best, best_residual = T, residual
        if len(residuals) > 1 and abs(residuals[-2] - residual) < tol:
            converged = True
            break
        R, t = best_fit_transform(source, target[idx])
        T = rigid.from_matrix(R, t)
    if not converged:
        logging.warning(f"[ICP] no convergence after {max_iter} iterations (residual {residuals[-1]:.3g})")
    return IcpResult(
        transform=best, converged=converged, local_minimum=converged and best_residual > STALL_RESIDUAL,
        iterations=len(residuals), residuals=residuals,
    )


def icp_predictor(max_iter=50, tol=1e-6):
    return lambda sample: icp_baseline(sample.source, sample.target, max_iter, tol).transform


def bench(params, samples, noise_kinds=NOISE_ORDER, seed=1, noise_config=NoiseConfig(), threads=1,
          icp_max_iter=50, icp_tol=1e-6, model_name="RegionReg"):
    predictors = {model_name: model_predictor(params), "ICP": icp_predictor(icp_max_iter, icp_tol)}
    return evaluate_predictors(predictors, samples, noise_kinds, seed, noise_config, threads)


# --- ablation ---

def ablate(train_samples, eval_samples, model_config, train_config, seed=1, noise_kinds=(CLEAN,),
           noise_config=NoiseConfig()):
    """Trains ModelA/B/C with the same seeds and data order and evaluates each on the same pairs."""
    dataset = [s.training_view() for s in train_samples]
    rows = []
    for name, overrides in ABLATION_VARIANTS.items():
        config = replace(model_config, **overrides)
        logging.info(f"[Model {name}] training with {config}")
        result = train(dataset, train_config, model_config=config)
        rows += evaluate(result.params, eval_samples, noise_kinds, seed, noise_config,
                         train_config.threads, model_name=name)
    return rows


# --- report I/O ---

def write_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in zip(CSV_HEADER, astuple(row))})
    logging.info(f"Report with {len(rows)} rows written to {path}")


def _coerce(record):
    try:
        return EvalRow(**{name: _ROW_TYPES[name](record[name]) for name in CSV_HEADER})
    except (KeyError, ValueError, TypeError) as e:
        raise EvalError(f"malformed report record {record}: {e}") from e


def read_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise EvalError(f"{path}: header {reader.fieldnames} does not match {list(CSV_HEADER)}")
        return [_coerce(record) for record in reader]


def _cell(value):
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def format_table(rows, columns=CSV_HEADER):
    """Whitespace-aligned text table, floats at 6 significant digits."""
    cells = [list(columns)] + [[_cell(getattr(row, c)) for c in columns] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(columns))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in cells) + "\n"


def parse_table(text):
    lines = [line.split() for line in text.splitlines() if line.strip()]
    if not lines:
        raise EvalError("empty report table")
    header = lines[0]
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if len(line) != len(header):
            raise EvalError(f"table line {line_no}: {len(line)} cells under a {len(header)}-column header")
        try:
            records.append(dict(zip(header, (v if k in ("model", "noise") else float(v)
                                             for k, v in zip(header, line)))))
        except ValueError as e:
            raise EvalError(f"table line {line_no}: {e}") from e
    return records


def write_table(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_table(rows))
    logging.info(f"Text table with {len(rows)} rows written to {path}")


def load_report(path):
    """Rows of a report written by write_csv (.csv) or write_table (any other suffix)."""
    if Path(path).suffix.lower() == ".csv":
        return read_csv(path)
    text = Path(path).read_text()
    header = next((line.split() for line in text.splitlines() if line.strip()), [])
    if tuple(header) != CSV_HEADER:
        raise EvalError(f"{path}: header {header} does not match {list(CSV_HEADER)}")
    return [_coerce(record) for record in parse_table(text)]


def print_report(rows, title="Registration report", columns=CSV_HEADER):
    table = Table(title=title)
    for column in columns:
        table.add_column(column, justify="left" if column in ("model", "noise") else "right")
    for row in rows:
        table.add_row(*(_cell(getattr(row, c)) for c in columns))
    console.print(table)
