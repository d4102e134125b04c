# ==============================================================================
# Static configuration from environment variables (.env supported) and the
# per-run configuration: built-in defaults <- YAML file <- command-line flags.
# ==============================================================================

import os
import logging
from pathlib import Path

import yaml
from dotenv import load_dotenv

from app.services.data import NoiseConfig, SHAPE_KINDS
from app.services.errors import ConfigError
from app.services.pipeline import ModelConfig, TrainConfig

# Load environment variables from a .env file if it exists
load_dotenv()

EFFECTIVE_CONFIG_NAME = "config.effective.yaml"

# key -> (type, default, help)
CONFIG_FIELDS = {
    "n_regions": (int, 8, "number of region slots n"),
    "embed_dim": (int, 64, "embedding width d"),
    "attention_layers": (int, 2, "self-attention layers L"),
    "position_encoding": (bool, True, "add the centroid position encoding"),
    "attention_scale": (bool, False, "scale attention logits by 1/sqrt(d)"),
    "strict_attention": (bool, False, "weight alpha(f_i) instead of alpha(f_j)"),
    "epochs": (int, 300, "training epochs"),
    "batch_size": (int, 4, "pairs per optimizer step"),
    "learning_rate": (float, 1e-3, "Adam learning rate"),
    "recon_weight": (float, 0.1, "weight of the reconstruction loss"),
    "seed": (int, 1, "master seed"),
    "negative_samples": (int, 256, "occupancy probes per shape"),
    "points_per_shape": (int, 256, "surface points per synthetic shape"),
    "train_pairs": (int, 200, "synthetic training pairs"),
    "eval_pairs": (int, 64, "held-out pairs per noise kind"),
    "shape_kinds": (list, list(SHAPE_KINDS), "primitive kinds to draw"),
    "train_files": (list, [], "xyz/ply clouds to train on instead of synthetic shapes"),
    "eval_files": (list, [], "xyz/ply clouds to evaluate on instead of synthetic shapes"),
    "independent_sampling": (bool, False, "resample the target surface instead of permuting the source"),
    "max_rotation_deg": (float, 45.0, "per-axis rotation cap in degrees"),
    "max_translation": (float, 0.5, "per-axis translation cap"),
    "di_keep_ratio": (float, 0.75, "data incompleteness keep ratio"),
    "pd_sigma": (float, 0.1, "point drift sigma"),
    "pd_clip": (float, 0.05, "point drift clip bound"),
    "do_fraction": (float, 0.1, "fraction of points replaced by outliers"),
    "do_sigma": (float, 0.5, "outlier sigma"),
    "icp_max_iter": (int, 50, "ICP iteration cap"),
    "icp_tol": (float, 1e-6, "ICP residual-change tolerance"),
    "threads": (int, 1, "bound on internal parallelism"),
    "output_dir": (str, "runs/latest", "directory for every output file"),
}
# may be left empty
OPTIONAL_LISTS = {"train_files", "eval_files"}


def get_static_config():
    """Loads static configuration from environment variables."""
    logging.info("Loading static configuration from environment variables")
    config = {}
    seed = os.getenv("REGIONREG_SEED")
    config['REGIONREG_SEED'] = int(seed) if seed not in (None, "") else None
    config['REGIONREG_THREADS'] = int(os.getenv("REGIONREG_THREADS", 1))
    config['REGIONREG_LOG_LEVEL'] = os.getenv("REGIONREG_LOG_LEVEL", "INFO").upper()
    logging.info("Static configuration loaded.")
    return config


def _coerce(key, value):
    kind = CONFIG_FIELDS[key][0]
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is list:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if not value and key not in OPTIONAL_LISTS:
            raise ConfigError(f"{key}: expected a non-empty list, got {value!r}")
        return [str(v) for v in value]
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected {kind.__name__}, got a boolean")
    try:
        coerced = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    if kind is int and isinstance(value, float) and value != coerced:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return coerced


def load_run_config(path=None, overrides=None, static_config=None):
    """Precedence: flags > file > REGIONREG_* environment > defaults."""
    static_config = static_config or {}
    config = {key: list(spec[1]) if spec[0] is list else spec[1] for key, spec in CONFIG_FIELDS.items()}
    if static_config.get('REGIONREG_SEED') is not None:
        config['seed'] = static_config['REGIONREG_SEED']
    if static_config.get('REGIONREG_THREADS'):
        config['threads'] = static_config['REGIONREG_THREADS']

    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config file {path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping, got {type(loaded).__name__}")
        unknown = sorted(set(loaded) - set(CONFIG_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {unknown}")
        config.update({key: _coerce(key, value) for key, value in loaded.items()})

    for key, value in (overrides or {}).items():
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            config[key] = _coerce(key, value)

    unknown_kinds = [k for k in config['shape_kinds'] if k not in SHAPE_KINDS]
    if unknown_kinds:
        raise ConfigError(f"shape_kinds: unknown kinds {unknown_kinds}; expected a subset of {list(SHAPE_KINDS)}")
    if config['threads'] < 1 or config['n_regions'] < 1 or config['embed_dim'] < 1:
        raise ConfigError("threads, n_regions and embed_dim must be positive")
    return config


def write_effective_config(config, directory):
    path = Path(directory) / EFFECTIVE_CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dict(config), sort_keys=True))
    logging.info(f"Effective config written to {path}")
    return path


def model_config(config):
    return ModelConfig(
        n_regions=config['n_regions'], embed_dim=config['embed_dim'],
        attention_layers=config['attention_layers'], seed=config['seed'],
        position_encoding=config['position_encoding'], attention_scale=config['attention_scale'],
        strict_attention=config['strict_attention'],
    )


def train_config(config):
    return TrainConfig(
        epochs=config['epochs'], batch_size=config['batch_size'], learning_rate=config['learning_rate'],
        recon_weight=config['recon_weight'], seed=config['seed'],
        negative_samples=config['negative_samples'], threads=config['threads'],
    )


def noise_config(config):
    return NoiseConfig(
        di_keep_ratio=config['di_keep_ratio'], pd_sigma=config['pd_sigma'], pd_clip=config['pd_clip'],
        do_fraction=config['do_fraction'], do_sigma=config['do_sigma'],
    )
