"""Prototype dictionaries and the contrastive loss.

Fills a three-class dictionary with noisy copies of three directions and
scores a query against it under each aggregation rule. A query pointing at
its own class gives a small loss; one pointing elsewhere gives a large one.
"""

import numpy as np

from protoalign import tensor as T
from protoalign.alignment import Prototype
from protoalign.proto_dict import AggregationStrategy, FeatureDictionary, loss_cl
from protoalign.tensor import Tensor

rng = np.random.default_rng(5)
centres = np.eye(3)
d = FeatureDictionary(num_classes=3, depth=3, capacity=8)
for step in range(12):
    for c in range(3):
        d.push(Prototype(c, Tensor(centres[c] + 0.3 * rng.normal(size=3)), "s", 1))
print("occupancy after 12 pushes per class (capacity 8):", d.occupancies())

with T.precision("double"):
    for kind in ("max_similarity", "mean_all", "mean_top_k"):
        s = AggregationStrategy(kind, k=3)
        good = loss_cl([Prototype(0, Tensor(centres[0]), "t", 1)], d, 1.0, s).item()
        bad = loss_cl([Prototype(0, Tensor(centres[2]), "t", 1)], d, 1.0, s).item()
        print(f"{kind:15s} aligned query {good:.4f}   misaligned query {bad:.4f}")
