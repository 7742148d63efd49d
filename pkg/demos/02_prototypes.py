"""Class prototypes and the similarity loss on a hand-made embedding field.

Two classes occupy the left and right halves of a 4x6 grid. Embeddings are
noisy copies of one direction per class, so the within-class term is small
and the cross-class term reflects how far apart the two directions are.
"""

import numpy as np

from protoalign import tensor as T
from protoalign.alignment import SupervisionMap, compute_prototypes, confidence_mask, loss_dc, loss_sc
from protoalign.tensor import Tensor

rng = np.random.default_rng(3)
labels = np.zeros((4, 6), dtype=int)
labels[:, 3:] = 1
directions = np.array([[1.0, 0.0, 0.2], [0.1, 1.0, 0.0]])

with T.precision("double"):
    for noise in (0.0, 0.3, 1.0):
        field = directions[labels].transpose(2, 0, 1) + noise * rng.normal(size=(3, 4, 6))
        emb = Tensor(field)
        sup = SupervisionMap(labels, np.ones_like(labels, dtype=bool))
        protos = compute_prototypes(emb, sup, [0, 1], min_pixels=1)
        print(f"noise {noise:.1f}: L_sc {loss_sc(emb, sup, protos).item():.4f}  L_dc {loss_dc(protos).item():.4f}")

# pseudo-labels keep only confident pixels
probs = np.stack([np.linspace(0.5, 1.0, 6)[None].repeat(4, 0)])
probs = np.concatenate([probs, 1 - probs])
mask = confidence_mask(probs, 0.9)
print("\nconfident pixels per row at threshold 0.9:", mask.valid.sum(axis=1))
