# ==============================================================================
# Command orchestration called by run.py. Each command takes the effective
# run config, does its work through the services, and writes its outputs
# (plus config.effective.yaml) into config['output_dir'].
# ==============================================================================

import logging
from pathlib import Path

from rich.console import Console

from app.config import model_config, noise_config, train_config, write_effective_config
from app.services import data, evalbench, pipeline, rigid
from app.services.cloud import load_cloud, save_cloud
from app.services.errors import ConfigError

CHECKPOINT_NAME = "model.ckpt"
TRACE_NAME = "loss_trace.csv"
REPORT_NAME = "report.csv"
BENCH_NAME = "bench.csv"
ABLATION_NAME = "ablation.csv"
EVAL_STREAM = 7

console = Console()


def _output_dir(config):
    directory = Path(config['output_dir'])
    directory.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, directory)
    return directory


def _dataset(config, count, seed, files=()):
    if files:
        return data.pairs_from_files(files, seed, max_rotation_deg=config['max_rotation_deg'],
                                     max_translation=config['max_translation'])
    return data.build_dataset(
        count, seed, kinds=tuple(config['shape_kinds']), points_per_shape=config['points_per_shape'],
        negative_samples=config['negative_samples'], independent_sampling=config['independent_sampling'],
        max_rotation_deg=config['max_rotation_deg'], max_translation=config['max_translation'],
    )


def training_samples(config):
    return _dataset(config, config['train_pairs'], config['seed'], config['train_files'])


def evaluation_samples(config):
    # held out: drawn from a different seed stream than the training pairs
    return _dataset(config, config['eval_pairs'], data.child_seed(config['seed'], EVAL_STREAM), config['eval_files'])


def train(config):
    out = _output_dir(config)
    logging.info("[Train] --- Building training pairs ---")
    dataset = [sample.training_view() for sample in training_samples(config)]
    result = pipeline.train(dataset, train_config(config), model_config=model_config(config))
    pipeline.save_checkpoint(out / CHECKPOINT_NAME, result.params)
    pipeline.write_loss_trace(out / TRACE_NAME, result.trace)
    logging.info(f"[Train] Completed {len(result.trace)} epochs; outputs in {out}")
    return result


def resolve_params(config, checkpoint=None, train_first=False):
    if checkpoint:
        return pipeline.load_checkpoint(checkpoint)
    if train_first:
        return train(config).params
    raise ConfigError("a checkpoint (--checkpoint) or --train is required")


def register(config, source, target, checkpoint, output=None):
    _output_dir(config)
    params = pipeline.load_checkpoint(checkpoint)
    S, G = load_cloud(source), load_cloud(target)
    transform = pipeline.register(S, G, params).transform
    console.print(" ".join(f"{v:.9g}" for v in transform.as_vector()), soft_wrap=True)
    logging.info(f"[Register] {source} -> {target}: {transform}")
    if output:
        save_cloud(output, rigid.apply(transform, S))
    return transform


def evaluate(config, checkpoint=None, train_first=False, noise_kinds=None):
    params = resolve_params(config, checkpoint, train_first)
    out = _output_dir(config)
    rows = evalbench.evaluate(
        params, evaluation_samples(config), noise_kinds or evalbench.NOISE_ORDER, config['seed'],
        noise_config(config), config['threads'],
    )
    evalbench.write_csv(out / REPORT_NAME, rows)
    evalbench.write_table((out / REPORT_NAME).with_suffix(".txt"), rows)
    evalbench.print_report(rows, title="Evaluation")
    return rows


def export_samples(samples, params, noise_cfg, seed, count, directory):
    """source / target / aligned PLY triplets for the first `count` pairs of every noise kind."""
    predict = evalbench.model_predictor(params)
    for kind in evalbench.NOISE_ORDER:
        for i, sample in enumerate(evalbench.noisy_samples(samples[:count], kind, seed, noise_cfg)):
            aligned = rigid.apply(predict(sample), sample.source)
            stem = Path(directory) / "samples" / f"{kind}_{i:03d}"
            save_cloud(f"{stem}_source.ply", sample.source)
            save_cloud(f"{stem}_target.ply", sample.target)
            save_cloud(f"{stem}_aligned.ply", aligned)


def bench(config, checkpoint=None, train_first=False, export_count=0):
    params = resolve_params(config, checkpoint, train_first)
    out = _output_dir(config)
    samples = evaluation_samples(config)
    rows = evalbench.bench(
        params, samples, evalbench.NOISE_ORDER, config['seed'], noise_config(config), config['threads'],
        icp_max_iter=config['icp_max_iter'], icp_tol=config['icp_tol'],
    )
    evalbench.write_csv(out / BENCH_NAME, rows)
    evalbench.write_table((out / BENCH_NAME).with_suffix(".txt"), rows)
    evalbench.print_report(rows, title="Benchmark")
    if export_count:
        export_samples(samples, params, noise_config(config), config['seed'], export_count, out)
    return rows


def ablate(config):
    out = _output_dir(config)
    rows = evalbench.ablate(
        training_samples(config), evaluation_samples(config), model_config(config), train_config(config),
        config['seed'], noise_config=noise_config(config),
    )
    evalbench.write_csv(out / ABLATION_NAME, rows)
    evalbench.write_table((out / ABLATION_NAME).with_suffix(".txt"), rows)
    evalbench.print_report(rows, title="Ablation", columns=("model",) + evalbench.ABLATION_COLUMNS)
    return rows


def partition_export(config, source, checkpoint, output):
    """PLY of the source cloud with each point's hard region label."""
    _output_dir(config)
    params = pipeline.load_checkpoint(checkpoint)
    cloud = load_cloud(source)
    regions = pipeline.partition_cloud(cloud, params)
    save_cloud(output, cloud, fmt="ply", labels=regions.labels)
    logging.info(f"[Partition] region sizes {regions.counts.tolist()} written to {output}")
    return regions


def show_report(source):
    """Re-renders a saved report (.csv or aligned-text table) without touching the output directory."""
    rows = evalbench.load_report(source)
    evalbench.print_report(rows, title=Path(source).name)
    return rows
