"""Per-class FIFO prototype dictionaries and the prototype contrastive loss."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .alignment import COS_FLOOR, Prototype
from .io import write_tensor
from .tensor import Tensor

STRATEGIES = ("mean_top_k", "mean_all", "max_similarity")


@dataclass(frozen=True)
class AggregationStrategy:
    kind: str = "mean_top_k"
    k: int = 20

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown aggregation {self.kind!r}; choose from {STRATEGIES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


class EmptyClassError(LookupError):
    """The requested class queue holds no entries."""


class FeatureDictionary:
    """Bounded FIFO queue of detached prototype vectors for every class."""

    def __init__(self, num_classes: int, depth: int, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.num_classes = num_classes
        self.depth = depth
        self.capacity = capacity
        self._queues: list[deque] = [deque(maxlen=capacity) for _ in range(num_classes)]

    def push(self, proto: Prototype) -> None:
        if not 0 <= proto.class_id < self.num_classes:
            raise ValueError(f"class {proto.class_id} outside [0, {self.num_classes})")
        vec = proto.vector.data if isinstance(proto.vector, Tensor) else np.asarray(proto.vector)
        if vec.shape != (self.depth,):
            raise ValueError(f"prototype length {vec.shape} != dictionary depth {self.depth}")
        self._queues[proto.class_id].append(np.array(vec, dtype=np.float64))

    def occupancy(self, class_id: int) -> int:
        return len(self._queues[class_id])

    def occupancies(self) -> list[int]:
        return [len(q) for q in self._queues]

    def is_empty(self) -> bool:
        return not any(self._queues)

    def entries(self, class_id: int) -> np.ndarray:
        """Stored vectors of one class as an (L, depth) array, oldest first."""
        q = self._queues[class_id]
        if not q:
            return np.zeros((0, self.depth))
        return np.stack(q)

    def as_matrix(self, class_id: int) -> np.ndarray:
        """The (depth, L) layout of one class key."""
        return self.entries(class_id).T

    def dump(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c in range(self.num_classes):
            write_tensor(directory / f"class_{c:02d}.pseg", self.as_matrix(c).astype(np.float64))
        with open(directory / "dictionary.json", "w") as fh:
            json.dump(
                {"depth": self.depth, "capacity": self.capacity, "counts": self.occupancies()}, fh, indent=1
            )


def dict_push(dictionary: FeatureDictionary, proto: Prototype) -> FeatureDictionary:
    dictionary.push(proto)
    return dictionary


def class_similarities(query: Prototype, dictionary: FeatureDictionary, class_id: int) -> Tensor:
    """Cosine similarity of the query with each stored entry of one class."""
    entries = dictionary.entries(class_id)
    if len(entries) == 0:
        raise EmptyClassError(f"class {class_id} queue is empty")
    q = query.vector
    e = Tensor(entries.astype(q.dtype))
    dots = T.matmul(e, q)
    norms = Tensor((entries * entries).sum(axis=1).astype(q.dtype)) * T.sum(q * q)
    return dots / T.sqrt(T.clamp_min(norms, COS_FLOOR**2))


def aggregate(similarities: Tensor, strategy: AggregationStrategy) -> Tensor:
    if similarities.size == 0:
        raise ValueError("cannot aggregate an empty similarity vector")
    if strategy.kind == "mean_all":
        return T.mean(similarities)
    if strategy.kind == "max_similarity":
        return T.max_reduce(similarities)
    order = np.argsort(-similarities.data, kind="stable")[: strategy.k]
    # keep storage order so k >= L reproduces mean_all exactly
    return T.mean(similarities[np.sort(order)])


def contributing_queries(queries: Sequence[Prototype], dictionary: FeatureDictionary) -> list[Prototype]:
    return [q for q in queries if dictionary.occupancy(q.class_id) > 0]


def loss_cl(
    queries: Sequence[Prototype],
    dictionary: FeatureDictionary,
    tau: float = 1.0,
    strategy: AggregationStrategy = AggregationStrategy(),
) -> Tensor:
    """Prototype contrastive loss against a dictionary.

    Each query's own class is the positive; every other non-empty class is
    a negative. Queries whose own class queue is empty are skipped, and an
    exact zero is returned when none contribute.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    active = contributing_queries(queries, dictionary)
    if not active:
        dtype = queries[0].vector.dtype if queries else T.get_default_dtype()
        return Tensor(np.zeros((), dtype=dtype))
    classes = [c for c in range(dictionary.num_classes) if dictionary.occupancy(c) > 0]
    terms = []
    for q in active:
        v = T.stack([aggregate(class_similarities(q, dictionary, c), strategy) for c in classes]) / tau
        shift = float(v.data.max())
        lse = T.log(T.sum(T.exp(v - shift))) + shift
        terms.append(lse - v[classes.index(q.class_id)])
    return T.mean(T.stack(terms))
