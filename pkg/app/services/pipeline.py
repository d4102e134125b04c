# ==============================================================================
# End-to-end registration network g_theta(S, G): encode -> partition ->
# position-encode -> attend -> decode -> fuse, with one set of weights shared
# by source and target. Also holds the two-term loss (Chamfer alignment plus
# inside-outside reconstruction), the training loop and checkpoint I/O.
# ==============================================================================

import csv
import io
import json
import logging
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from app.services import diffcore as dc
from app.services import attention, decoder, encoder, partition, rigid
from app.services.cloud import chamfer
from app.services.errors import (CheckpointError, ConfigError, NonFiniteError, PartitionError, RegionRegError,
                                 ShapeMismatchError, TrainingError)

CHECKPOINT_VERSION = "regionreg-checkpoint/1"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class ModelConfig:
    n_regions: int = 8
    embed_dim: int = 64
    attention_layers: int = 2
    seed: int = 1
    position_encoding: bool = True
    attention_scale: bool = False
    strict_attention: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-3
    recon_weight: float = 0.1
    seed: int = 1
    negative_samples: int = 256
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.negative_samples < 2 or self.threads < 1:
            raise ConfigError(f"invalid training config {self}")
        if not self.learning_rate > 0 or self.recon_weight < 0:
            raise ConfigError(f"learning_rate must be > 0 and recon_weight >= 0, got {self}")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class NetworkParams:
    encoder: encoder.EncoderParams
    partition: partition.PartitionParams
    attention: attention.AttentionParams
    decoder: decoder.DecoderParams
    config: ModelConfig

    def named_tensors(self):
        named = {}
        for prefix in ("encoder", "partition", "attention", "decoder"):
            for name, tensor in getattr(self, prefix).named_tensors().items():
                named[f"{prefix}.{name}"] = tensor
        return named

    def parameters(self):
        return list(self.named_tensors().values())


def init_params(config):
    rng = np.random.default_rng(config.seed)
    d, n = config.embed_dim, config.n_regions
    return NetworkParams(
        encoder=encoder.init_encoder(d, rng),
        partition=partition.init_partition(n, d, rng),
        attention=attention.init_attention(d, config.attention_layers, rng),
        decoder=decoder.init_decoder(n, d, rng),
        config=config,
    )


# --- forward ---

@dataclass
class ForwardPass:
    fused: decoder.FusedTransform
    region_transforms: decoder.RegionTransforms
    regions_source: partition.RegionState
    regions_target: partition.RegionState
    encoded_source: encoder.EncodedShape
    encoded_target: encoder.EncodedShape


@dataclass
class Registration:
    transform: rigid.RigidTransform
    regions_source: partition.RegionState
    regions_target: partition.RegionState


def _shape_branch(cloud, params):
    cfg = params.config
    encoded = encoder.encode(cloud, params.encoder)
    regions = partition.partition(cloud, encoded, params.partition)
    rtfs = attention.region_transformer(
        regions.rfs, regions.centroids, regions.occupied, params.attention,
        position_encoding=cfg.position_encoding, scale_logits=cfg.attention_scale, strict=cfg.strict_attention,
    )
    return encoded, regions, rtfs


def forward(S, G, params):
    encoded_s, regions_s, rtfs_s = _shape_branch(S, params)
    encoded_g, regions_g, rtfs_g = _shape_branch(G, params)
    region_transforms = decoder.decode_regions(rtfs_s, rtfs_g, params.decoder, regions_s.counts, regions_g.counts)
    return ForwardPass(
        fused=decoder.fuse_transforms(region_transforms), region_transforms=region_transforms,
        regions_source=regions_s, regions_target=regions_g,
        encoded_source=encoded_s, encoded_target=encoded_g,
    )


def partition_cloud(P, params):
    """Hard region assignment of a single cloud."""
    return partition.partition(P, encoder.encode(P, params.encoder), params.partition)


def register(S, G, params):
    """Predicts the rigid transform moving S onto G."""
    result = forward(S, G, params)
    return Registration(result.fused.transform, result.regions_source, result.regions_target)


# --- loss ---

@dataclass
class LossTerms:
    total: dc.Tensor
    alignment: float
    reconstruction: float


def reconstruction_loss(sampled, embedding, params):
    """Mean binary cross-entropy of the occupancy output against inside/outside labels."""
    logits = partition.occupancy_logits(sampled, embedding, params.partition)
    labels = dc.tensor(sampled.occupancy.astype(float))
    # BCE(sigmoid(z), y) = softplus(z) - y z
    return dc.mean(dc.sub(dc.softplus(logits), dc.mul(labels, logits)))


def loss_fn(S, G, sampled_source, sampled_target, params, recon_weight):
    result = forward(S, G, params)
    moved = rigid.apply_tensor(result.fused.q, result.fused.t, S.points)
    alignment = chamfer(moved, G)
    total, recon_value = alignment, 0.0
    if recon_weight > 0 and sampled_source is not None and sampled_target is not None:
        recon = dc.add(
            reconstruction_loss(sampled_source, result.encoded_source.shape_embedding, params),
            reconstruction_loss(sampled_target, result.encoded_target.shape_embedding, params),
        )
        recon_value = recon.item()
        total = dc.add(alignment, dc.scale(recon, recon_weight))
    return LossTerms(total=total, alignment=alignment.item(), reconstruction=recon_value)


# --- training ---

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    alignment: float
    reconstruction: float


@dataclass
class TrainResult:
    params: NetworkParams
    trace: list


def _pair_gradients(pair, params, leaves, recon_weight):
    try:
        terms = loss_fn(pair.source, pair.target, pair.sampled_source, pair.sampled_target, params, recon_weight)
    except PartitionError as e:
        logging.warning(f"[Train] skipping pair: {e}")
        return None
    return terms.total.item(), terms.alignment, terms.reconstruction, dc.grad(terms.total, leaves)


def train(dataset, config, params=None, model_config=None):
    """Adam over batches of independent pairs; the dataset never carries ground-truth transforms."""
    pairs = list(dataset)
    if not pairs:
        raise TrainingError("training dataset is empty")
    if params is None:
        params = init_params(model_config or ModelConfig(seed=config.seed))
    leaves = params.parameters()
    optimizer = dc.Adam(leaves, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    trace = []
    logging.info(f"Training {len(leaves)} tensors on {len(pairs)} pairs for {config.epochs} epochs "
                 f"(batch {config.batch_size}, lr {config.learning_rate}, lambda {config.recon_weight})")

    executor = ThreadPoolExecutor(max_workers=config.threads, thread_name_prefix="Worker") if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(pairs))
            totals, counted = np.zeros(3), 0
            for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
                batch = [pairs[i] for i in order[start:start + config.batch_size]]
                job = lambda pair: _pair_gradients(pair, params, leaves, config.recon_weight)
                try:
                    results = list(executor.map(job, batch)) if executor else [job(pair) for pair in batch]
                except NonFiniteError as e:
                    raise TrainingError(f"non-finite value at epoch {epoch}, batch {batch_no}: {e}") from e
                except RegionRegError as e:
                    raise TrainingError(f"{type(e).__name__} at epoch {epoch}, batch {batch_no}: {e}") from e
                results = [r for r in results if r is not None]
                if not results:
                    continue
                losses = np.array([r[:3] for r in results])
                if not np.all(np.isfinite(losses)):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
                # single commit point: sum in batch order
                summed = [sum(r[3][i] for r in results) / len(results) for i in range(len(leaves))]
                optimizer.step(summed)
                totals += losses.sum(axis=0)
                counted += len(results)
            if counted == 0:
                raise TrainingError(f"every pair had a degenerate partition at epoch {epoch}")
            record = EpochRecord(epoch, *(float(v) for v in totals / counted))
            trace.append(record)
            logging.info(f"[Epoch {epoch}] loss={record.loss:.6f} alignment={record.alignment:.6f} "
                         f"reconstruction={record.reconstruction:.6f}")
    finally:
        if executor:
            executor.shutdown()
    return TrainResult(params=params, trace=trace)


def write_loss_trace(path, trace):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss", "alignment", "reconstruction"])
        for r in trace:
            writer.writerow([r.epoch, repr(r.loss), repr(r.alignment), repr(r.reconstruction)])
    logging.info(f"Loss trace written to {path}")


# --- checkpoints ---
# Layout: a zip archive (stored, fixed timestamps) holding meta.json
# {"version", "config", "tensors"} and one <name>.npy per weight array,
# each a little-endian float64 array in numpy's .npy format.

def _write_member(archive, name, payload):
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)


def save_checkpoint(path, params):
    named = params.named_tensors()
    meta = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(), "tensors": list(named)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        _write_member(archive, "meta.json", json.dumps(meta, sort_keys=True, indent=2).encode())
        for name, tensor in named.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(tensor.data, dtype="<f8"), allow_pickle=False)
            _write_member(archive, f"{name}.npy", buffer.getvalue())
    logging.info(f"Checkpoint with {len(named)} tensors saved to {path}")


def load_checkpoint(path, expected=None):
    """Reads a checkpoint; `expected` (a ModelConfig) is checked against the stored dims."""
    try:
        with zipfile.ZipFile(path) as archive:
            meta = json.loads(archive.read("meta.json").decode())
            version = meta.get("version")
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"checkpoint version {version!r} does not match supported {CHECKPOINT_VERSION!r}")
            config = ModelConfig.from_dict(meta["config"])
            if expected is not None:
                for key in ("n_regions", "embed_dim", "attention_layers"):
                    if getattr(config, key) != getattr(expected, key):
                        raise CheckpointError(
                            f"checkpoint {path} has {key}={getattr(config, key)} "
                            f"but {getattr(expected, key)} was expected ({CHECKPOINT_VERSION})")
            params = init_params(config)
            for name, tensor in params.named_tensors().items():
                array = np.lib.format.read_array(io.BytesIO(archive.read(f"{name}.npy")), allow_pickle=False)
                if array.shape != tensor.shape:
                    raise CheckpointError(f"{name}: stored shape {array.shape} != expected {tensor.shape}")
                tensor.data = np.array(array, dtype=dc.DTYPE)
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    try:
        encoder.check_consistent(params.encoder)
    except (ShapeMismatchError, NonFiniteError) as e:
        raise CheckpointError(f"checkpoint {path} holds an unusable encoder: {e}") from e
    logging.info(f"Checkpoint loaded from {path} ({config})")
    return params
