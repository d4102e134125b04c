# ==============================================================================
# Region transformer: centroid position encoding delta and stacked
# single-head self-attention over the occupied regions of one shape.
# Empty regions are masked out of both sides of the attention and stay zero.
# ==============================================================================

from dataclasses import dataclass

import numpy as np

from app.services import diffcore as dc
from app.services.errors import PartitionError

POSITION_HIDDEN = 32


@dataclass
class AttentionLayer:
    phi: dc.Tensor    # d x d, query map
    psi: dc.Tensor    # d x d, key map
    alpha: dc.Tensor  # d x d, value map


@dataclass
class AttentionParams:
    delta_w1: dc.Tensor  # 3 x 32
    delta_b1: dc.Tensor
    delta_w2: dc.Tensor  # 32 x d
    delta_b2: dc.Tensor
    layers: list

    @property
    def embed_dim(self):
        return self.delta_w2.shape[1]

    def named_tensors(self):
        named = {"delta.w1": self.delta_w1, "delta.b1": self.delta_b1,
                 "delta.w2": self.delta_w2, "delta.b2": self.delta_b2}
        for i, layer in enumerate(self.layers):
            named[f"layer{i}.phi"] = layer.phi
            named[f"layer{i}.psi"] = layer.psi
            named[f"layer{i}.alpha"] = layer.alpha
        return named


@dataclass
class RTFS:
    a: dc.Tensor       # n x d
    mask: np.ndarray   # True where the region is occupied


def init_attention(embed_dim, layer_count, rng):
    layers = [
        AttentionLayer(phi=dc.glorot_uniform(rng, embed_dim, embed_dim),
                       psi=dc.glorot_uniform(rng, embed_dim, embed_dim),
                       alpha=dc.glorot_uniform(rng, embed_dim, embed_dim))
        for _ in range(layer_count)
    ]
    return AttentionParams(
        delta_w1=dc.glorot_uniform(rng, 3, POSITION_HIDDEN), delta_b1=dc.zeros_param(POSITION_HIDDEN),
        delta_w2=dc.glorot_uniform(rng, POSITION_HIDDEN, embed_dim), delta_b2=dc.zeros_param(embed_dim),
        layers=layers,
    )


def position_encode(centroids, occupied, params):
    """p[k] = delta(centroid_k) for occupied regions, zero rows elsewhere."""
    occupied = np.asarray(occupied, dtype=bool)
    n = len(occupied)
    members = np.flatnonzero(occupied)
    if len(members) == 0:
        return dc.zeros((n, params.embed_dim))
    missing = [int(k) for k in members if centroids[k] is None]
    if missing:
        raise PartitionError(f"occupied regions {missing} have no centroid")
    coords = dc.tensor(np.stack([centroids[k] for k in members]))
    hidden = dc.relu(dc.linear(coords, params.delta_w1, params.delta_b1))
    encoded = dc.linear(hidden, params.delta_w2, params.delta_b2)
    return dc.scatter_rows(encoded, members, n)


def _unmasked(mask):
    members = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(members) == 0:
        raise PartitionError("self-attention over a fully masked region sequence")
    return members


def attention_weights(f, mask, params, layer, scale_logits=False):
    """m x m softmax of <phi(f_i), psi(f_j)> over the m unmasked regions."""
    members = _unmasked(mask)
    weights_of = params.layers[layer]
    rows = dc.take_rows(f, members)
    logits = dc.matmul(dc.matmul(rows, weights_of.phi), dc.transpose(dc.matmul(rows, weights_of.psi)))
    if scale_logits:
        logits = dc.scale(logits, 1.0 / np.sqrt(f.shape[1]))
    return dc.softmax(logits)


def self_attend(f, mask, params, layer, scale_logits=False, strict=False):
    """One attention layer with a residual connection; masked rows come out zero.

    strict=True sums the weights into the query's own value alpha(f_i),
    which reduces every row to alpha(f_i) + f_i.
    """
    members = _unmasked(mask)
    rows = dc.take_rows(f, members)
    weights = attention_weights(f, mask, params, layer, scale_logits)
    values = dc.matmul(rows, params.layers[layer].alpha)
    if strict:
        row_mass = dc.matmul(weights, dc.tensor(np.ones(values.shape)))
        mixed = dc.mul(row_mass, values)
    else:
        mixed = dc.matmul(weights, values)
    return dc.scatter_rows(dc.add(mixed, rows), members, f.shape[0])


def region_transformer(rfs, centroids, occupied, params, position_encoding=True,
                       scale_logits=False, strict=False):
    """RFS -> RTFS: f = p + l, then every attention layer in order."""
    f = rfs
    if position_encoding:
        f = dc.add(position_encode(centroids, occupied, params), rfs)
    for layer in range(len(params.layers)):
        f = self_attend(f, occupied, params, layer, scale_logits, strict)
    return RTFS(a=f, mask=np.asarray(occupied, dtype=bool).copy())
