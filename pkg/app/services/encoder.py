# ==============================================================================
# PointNet-style shape encoder: a shared per-point MLP 3 -> 64 -> 128 -> d
# followed by a max-pool over points giving the global shape embedding e.
# The same weights encode the source and the target shape.
# ==============================================================================

from dataclasses import dataclass

import numpy as np

from app.services import diffcore as dc
from app.services.cloud import PointCloud
from app.services.errors import CloudError, NonFiniteError, ShapeMismatchError

HIDDEN_SIZES = (64, 128)


@dataclass
class EncoderParams:
    w1: dc.Tensor
    b1: dc.Tensor
    w2: dc.Tensor
    b2: dc.Tensor
    w3: dc.Tensor
    b3: dc.Tensor

    @property
    def embed_dim(self):
        return self.w3.shape[1]

    def named_tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}


@dataclass
class EncodedShape:
    point_features: dc.Tensor   # N x d
    shape_embedding: dc.Tensor  # d


def init_encoder(embed_dim, rng):
    h1, h2 = HIDDEN_SIZES
    return EncoderParams(
        w1=dc.glorot_uniform(rng, 3, h1), b1=dc.zeros_param(h1),
        w2=dc.glorot_uniform(rng, h1, h2), b2=dc.zeros_param(h2),
        w3=dc.glorot_uniform(rng, h2, embed_dim), b3=dc.zeros_param(embed_dim),
    )


def encode(P, params):
    """Per-point features and their max-pool over points."""
    coords = P.points if isinstance(P, PointCloud) else P
    x = dc.as_tensor(coords)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 1:
        raise CloudError(f"encoder expects a non-empty N x 3 input, got shape {x.shape}")
    h = dc.relu(dc.linear(x, params.w1, params.b1))
    h = dc.relu(dc.linear(h, params.w2, params.b2))
    features = dc.relu(dc.linear(h, params.w3, params.b3))
    embedding, _ = dc.max_reduce(features, axis=0)
    return EncodedShape(point_features=features, shape_embedding=embedding)


def check_consistent(params):
    """Raises if layer widths do not chain."""
    h1, h2 = HIDDEN_SIZES
    expected = {"w1": (3, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,),
                "w3": (h2, params.embed_dim), "b3": (params.embed_dim,)}
    for name, tensor in params.named_tensors().items():
        if tensor.shape != expected[name]:
            raise ShapeMismatchError(f"encoder.{name}", tensor.shape, expected[name])
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"encoder.{name} holds non-finite weights")
