"""Loss-component ablation at toy scale.

Runs the base objective, base plus the similarity term, and the full
objective on one seed, then prints the comparison table. Twelve steps on
16x16 slices are too few for the small proposed terms to flip any predicted
pixel, so the three rows usually coincide here. The acceptance suite runs
the same grid at desk scale over three seeds.
"""

import tempfile
from pathlib import Path

from protoalign import Config, ablate
from protoalign.data import generate_dataset, write_dataset

cfg = Config().with_overrides([
    "data.image_size=16", "data.n_source=16", "data.n_target=16", "data.n_test=8",
    "model.enc_channels=8,16,16", "model.head_channels=8", "model.embed_depth=8",
    "train.epochs=3", "dict.dict_size=20", "dict.topk=3",
])

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_dataset(generate_dataset(cfg.data), cfg.data, tmp / "data")
    ablate(cfg, tmp / "data", tmp / "abl", "losses", seeds=[0], log=print)
    print((tmp / "abl" / "ablation_losses.csv").read_text())
