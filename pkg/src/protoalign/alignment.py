"""Class-wise prototypes and the cosine similarity losses built on them.

A prototype is the mean embedding vector of the pixels assigned to one
class in one image. ``loss_sc`` pulls every pixel embedding towards its
class prototype; ``loss_dc`` pushes prototypes of different classes apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

COS_FLOOR = 1e-8
DOMAINS = ("s", "s->t", "t", "t->s")


@dataclass
class SupervisionMap:
    labels: np.ndarray  # (H, W) int
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.labels.shape != self.valid.shape:
            raise ValueError(f"labels {self.labels.shape} and valid {self.valid.shape} differ in shape")

    def pixel_index(self, class_id: int) -> np.ndarray:
        return np.flatnonzero((self.labels == class_id) & self.valid)


@dataclass
class Prototype:
    class_id: int
    vector: Tensor
    domain: str
    pixel_count: int

    def __post_init__(self):
        if self.pixel_count < 1:
            raise ValueError("prototype needs at least one pixel")


def _probs_array(probs) -> np.ndarray:
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if arr.ndim != 3:
        raise ValueError(f"expected (C, H, W) probabilities, got shape {arr.shape}")
    return arr


def confidence_mask(probs, threshold: float) -> SupervisionMap:
    """Argmax pseudo-labels, valid where the winning probability reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    arr = _probs_array(probs)
    return SupervisionMap(arr.argmax(axis=0), arr.max(axis=0) >= threshold)


def argmax_supervision(probs) -> SupervisionMap:
    """Argmax labels with every pixel valid (source-path supervision)."""
    arr = _probs_array(probs)
    return SupervisionMap(arr.argmax(axis=0), np.ones(arr.shape[1:], dtype=bool))


def _pixels_by_row(embedding: Tensor) -> Tensor:
    d = embedding.shape[0]
    return embedding.reshape(d, -1).transpose()


def _check_aligned(embedding: Tensor, supervision: SupervisionMap) -> None:
    if embedding.ndim != 3 or embedding.shape[1:] != supervision.labels.shape:
        raise ValueError(
            f"embedding {embedding.shape} is not spatially aligned with supervision {supervision.labels.shape}"
        )


def compute_prototypes(
    embedding: Tensor,
    supervision: SupervisionMap,
    classes: Iterable[int],
    min_pixels: int = 4,
    domain: str = "s",
) -> list[Prototype]:
    """Masked class means of a (D, H, W) embedding.

    Classes with fewer than ``min_pixels`` valid pixels are skipped.
    """
    _check_aligned(embedding, supervision)
    rows = _pixels_by_row(embedding)
    out = []
    for m in classes:
        idx = supervision.pixel_index(m)
        if len(idx) < max(min_pixels, 1):
            continue
        # sequential row sum, then one division: same arithmetic as a scalar loop
        vector = T.div(T.sum(rows[idx], axis=0), float(len(idx)))
        out.append(Prototype(int(m), vector, domain, len(idx)))
    return out


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of every row of ``a`` (n, D) with vector ``b`` (D,)."""
    dots = T.matmul(a, b)
    norms = T.sum(a * a, axis=1) * T.sum(b * b)
    return dots / T.sqrt(T.clamp_min(norms, COS_FLOOR**2))


def _zero(like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else T.get_default_dtype()
    return Tensor(np.zeros((), dtype=dtype))


def loss_sc(embedding: Tensor, supervision: SupervisionMap, prototypes: Sequence[Prototype]) -> Tensor:
    """Mean over classes of the mean (1 - cos) between pixels and their prototype."""
    if not prototypes:
        return _zero(embedding)
    _check_aligned(embedding, supervision)
    rows = _pixels_by_row(embedding)
    terms = []
    for proto in prototypes:
        idx = supervision.pixel_index(proto.class_id)
        if len(idx) == 0:
            raise ValueError(f"class {proto.class_id} has a prototype but no valid pixels")
        cos = cosine_rows(rows[idx], proto.vector)
        terms.append(T.mean(1.0 - cos))
    return T.mean(T.stack(terms))


def loss_dc(prototypes: Sequence[Prototype]) -> Tensor:
    """Mean over unordered prototype pairs of (1 + cos)."""
    k = len(prototypes)
    if k < 2:
        return _zero(prototypes[0].vector if prototypes else None)
    p = T.stack([proto.vector for proto in prototypes])
    gram = T.matmul(p, p.T)
    sq = T.sum(p * p, axis=1)
    norms = T.reshape(sq, (k, 1)) * T.reshape(sq, (1, k))
    cos = gram / T.sqrt(T.clamp_min(norms, COS_FLOOR**2))
    iu = np.triu_indices(k, 1)
    return T.mean(1.0 + cos[iu])


def loss_sim(embedding: Tensor, supervision: SupervisionMap, prototypes: Sequence[Prototype]) -> Tensor:
    return loss_sc(embedding, supervision, prototypes) + loss_dc(prototypes)
