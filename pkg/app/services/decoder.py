# ==============================================================================
# Region-aware decoder: one MLP g_k per region maps [a^S_k, a^G_k] to a
# 7-vector (quaternion + translation); the per-region transforms are fused
# with point-count weights into a single rigid transform.
# ==============================================================================

import logging
from dataclasses import dataclass

import numpy as np

from app.services import diffcore as dc
from app.services import rigid
from app.services.errors import FusionError, PartitionError

DECODER_HIDDEN = 64
TRANSFORM_DIM = 7
# final-layer bias: unit quaternion (1, 0, 0, 0) and zero translation
IDENTITY_BIAS = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
SINGULAR_NORM = 1e-8


@dataclass
class DecoderBranch:
    w1: dc.Tensor  # 2d x 64
    b1: dc.Tensor
    w2: dc.Tensor  # 64 x 7
    b2: dc.Tensor


@dataclass
class DecoderParams:
    branches: list

    @property
    def n_regions(self):
        return len(self.branches)

    def named_tensors(self):
        named = {}
        for k, branch in enumerate(self.branches):
            for field in ("w1", "b1", "w2", "b2"):
                named[f"g{k}.{field}"] = getattr(branch, field)
        return named


@dataclass
class RegionTransforms:
    quaternions: list      # (4,) tensors, unit length, w >= 0
    translations: list     # (3,) tensors
    weights: np.ndarray    # fusion weights, zero for unusable regions
    usable: np.ndarray     # occupied in both shapes

    def transforms(self):
        return [rigid.from_quaternion(q.data, t.data) for q, t in zip(self.quaternions, self.translations)]

    @classmethod
    def from_transforms(cls, transforms, weights, usable=None):
        weights = np.asarray(weights, dtype=float)
        usable = weights > 0 if usable is None else np.asarray(usable, dtype=bool)
        return cls(
            quaternions=[dc.tensor(T.q) for T in transforms],
            translations=[dc.tensor(T.t) for T in transforms],
            weights=weights, usable=usable,
        )


@dataclass
class FusedTransform:
    q: dc.Tensor
    t: dc.Tensor

    @property
    def transform(self):
        return rigid.from_quaternion(self.q.data, self.t.data)


def init_decoder(n_regions, embed_dim, rng):
    branches = []
    for _ in range(n_regions):
        b2 = dc.tensor(IDENTITY_BIAS, requires_grad=True)
        branches.append(DecoderBranch(
            w1=dc.glorot_uniform(rng, 2 * embed_dim, DECODER_HIDDEN), b1=dc.zeros_param(DECODER_HIDDEN),
            w2=dc.zeros_param((DECODER_HIDDEN, TRANSFORM_DIM)), b2=b2,
        ))
    return DecoderParams(branches)


def _unit_quaternion(raw_q):
    if np.linalg.norm(raw_q.data) < 1e-12:
        return dc.tensor(IDENTITY_BIAS[:4])
    q = dc.normalize(raw_q)
    return dc.scale(q, -1.0) if q.data[0] < 0 else q


def decode_region(branch, source_row, target_row):
    """g_k([a^S_k, a^G_k]) split into a unit quaternion and a translation."""
    hidden = dc.relu(dc.linear(dc.concat([source_row, target_row]), branch.w1, branch.b1))
    raw = dc.linear(hidden, branch.w2, branch.b2)
    return _unit_quaternion(dc.take_rows(raw, [0, 1, 2, 3])), dc.take_rows(raw, [4, 5, 6])


def fusion_weights(usable, counts_source, counts_target):
    """(N^S_k + N^G_k) normalised over the usable regions; zero elsewhere."""
    pooled = np.where(usable, np.asarray(counts_source) + np.asarray(counts_target), 0).astype(float)
    total = pooled.sum()
    return pooled / total if total > 0 else pooled


def decode_regions(rtfs_source, rtfs_target, params, counts_source, counts_target):
    if rtfs_source.a.shape != rtfs_target.a.shape or rtfs_source.a.shape[0] != params.n_regions:
        raise PartitionError(
            f"RTFS shapes {rtfs_source.a.shape} / {rtfs_target.a.shape} do not match {params.n_regions} decoders")
    usable = rtfs_source.mask & rtfs_target.mask
    if not np.any(usable):
        raise PartitionError("degenerate partition: no region is occupied in both shapes")
    skipped = int(np.sum((rtfs_source.mask | rtfs_target.mask) & ~usable))
    if skipped:
        logging.debug(f"[Decoder] {skipped} regions occupied in only one shape get zero weight")

    identity_q = dc.tensor(IDENTITY_BIAS[:4])
    zero_t = dc.zeros(3)
    quaternions, translations = [], []
    for k, branch in enumerate(params.branches):
        if not usable[k]:
            quaternions.append(identity_q)
            translations.append(zero_t)
            continue
        q, t = decode_region(branch, dc.take_rows(rtfs_source.a, k), dc.take_rows(rtfs_target.a, k))
        quaternions.append(q)
        translations.append(t)
    return RegionTransforms(quaternions, translations,
                            fusion_weights(usable, counts_source, counts_target), usable)


def fuse_transforms(rt):
    """Weighted translation sum and sign-aligned, renormalised quaternion sum."""
    weights = np.asarray(rt.weights, dtype=float)
    if not weights.sum() > 0:
        raise FusionError("fusion weights sum to zero")
    active = np.flatnonzero(weights > 0)
    # sign reference: heaviest region, ties to the lexicographically largest quaternion
    heaviest = active[weights[active] == weights[active].max()]
    reference = max((rt.quaternions[k].data for k in heaviest), key=tuple)

    q_sum, t_sum = None, None
    for k in active:
        sign = -1.0 if np.dot(rt.quaternions[k].data, reference) < 0 else 1.0
        q_term = dc.scale(rt.quaternions[k], sign * weights[k])
        t_term = dc.scale(rt.translations[k], weights[k])
        q_sum = q_term if q_sum is None else dc.add(q_sum, q_term)
        t_sum = t_term if t_sum is None else dc.add(t_sum, t_term)

    if np.linalg.norm(q_sum.data) < SINGULAR_NORM:
        raise FusionError("fusion singularity: weighted quaternions cancel out")
    q = dc.normalize(q_sum)
    if q.data[0] < 0:
        q = dc.scale(q, -1.0)
    return FusedTransform(q=q, t=t_sum)
