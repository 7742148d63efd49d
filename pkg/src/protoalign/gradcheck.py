"""Finite-difference suites for every training loss, run in double precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .alignment import SupervisionMap, compute_prototypes, loss_dc, loss_sc, loss_sim, Prototype
from .objectives import LossWeights, loss_all, loss_cycle, loss_lsgan, loss_seg
from .proto_dict import AggregationStrategy, FeatureDictionary, loss_cl
from .tensor import Tensor

EPS = 1e-6


@dataclass(frozen=True)
class GradResult:
    name: str
    cases: int
    max_error: float


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _supervision(rng, classes: int, size: int = 4) -> SupervisionMap:
    labels = rng.integers(0, classes, size=(size, size))
    # every class keeps >= 2 valid pixels; a lone pixel makes its term identically zero
    labels.flat[: 2 * classes] = np.tile(np.arange(classes), 2)
    valid = rng.random((size, size)) > 0.2
    valid.flat[: 2 * classes] = True
    return SupervisionMap(labels, valid)


def _dictionary(rng, num_classes: int, depth: int, per_class: int) -> FeatureDictionary:
    d = FeatureDictionary(num_classes, depth, capacity=per_class)
    for c in range(num_classes):
        for _ in range(per_class):
            d.push(Prototype(c, Tensor(rng.normal(size=depth)), "s", 1))
    return d


def _case_sc(rng):
    emb = _param(rng, 4, 4, 4)
    sup = _supervision(rng, 3)
    return (lambda: loss_sc(emb, sup, compute_prototypes(emb, sup, range(3), 2))), [emb]


def _case_dc(rng):
    vecs = [_param(rng, 5) for _ in range(3)]
    return (lambda: loss_dc([Prototype(c, v, "s", 1) for c, v in enumerate(vecs)])), vecs


def _case_cl(rng):
    d = _dictionary(rng, 3, 4, 6)
    queries = [_param(rng, 4) for _ in range(2)]
    classes = rng.integers(0, 3, size=2)
    tau = float(rng.uniform(0.5, 2.0))
    kind = ("mean_top_k", "mean_all", "max_similarity")[int(rng.integers(3))]
    strategy = AggregationStrategy(kind, 3)
    return (
        lambda: loss_cl([Prototype(int(c), q, "t", 1) for c, q in zip(classes, queries)], d, tau, strategy)
    ), queries


def _case_seg(rng):
    logits = _param(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    return (lambda: loss_seg(logits, labels)), [logits]


def _case_cycle(rng):
    a, b = _param(rng, 1, 1, 4, 4), _param(rng, 1, 1, 4, 4)
    return (lambda: loss_cycle(a, b)), [a, b]


def _case_lsgan_g(rng):
    fake = _param(rng, 2, 1, 3, 3)
    return (lambda: loss_lsgan(None, fake, "generator")), [fake]


def _case_lsgan_d(rng):
    real, fake = _param(rng, 2, 1, 3, 3), _param(rng, 2, 1, 3, 3)
    return (lambda: loss_lsgan(real, fake, "discriminator")), [real, fake]


def _case_all(rng):
    logits = _param(rng, 1, 3, 4, 4)
    labels = rng.integers(0, 3, size=(1, 4, 4))
    a, b = _param(rng, 1, 1, 4, 4), _param(rng, 1, 1, 4, 4)
    emb = _param(rng, 4, 4, 4)
    sup = _supervision(rng, 3)
    d = _dictionary(rng, 3, 4, 5)
    weights = LossWeights(*rng.uniform(0.01, 1.0, size=6))

    def f():
        protos = compute_prototypes(emb, sup, range(3), 2, "s")
        base = {"seg": loss_seg(logits, labels), "cycle": loss_cycle(a, b)}
        return loss_all(base, loss_sim(emb, sup, protos), loss_cl(protos, d, 1.0, AggregationStrategy("mean_top_k", 2)),
                        weights)

    return f, [logits, a, b, emb]


SUITES: dict[str, Callable] = {
    "L_sc": _case_sc,
    "L_dc": _case_dc,
    "L_cl": _case_cl,
    "L_seg": _case_seg,
    "L_cycle": _case_cycle,
    "LSGAN_generator": _case_lsgan_g,
    "LSGAN_discriminator": _case_lsgan_d,
    "L_all": _case_all,
}


def run_suite(cases: int = 20, seed: int = 0, names=None) -> list[GradResult]:
    """Worst relative error per loss over ``cases`` random instances."""
    results = []
    with T.precision("double"):
        for i, (name, make) in enumerate(SUITES.items()):
            if names is not None and name not in names:
                continue
            rng = np.random.default_rng([seed, i])
            worst = 0.0
            for _ in range(cases):
                f, params = make(rng)
                worst = max(worst, T.finite_difference_check(f, params, eps=EPS))
            results.append(GradResult(name, cases, worst))
    return results
