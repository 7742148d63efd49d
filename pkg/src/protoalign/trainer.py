"""Two-way cycle training with prototype alignment, inference and ablations.

One step runs both cycles (source -> G_S -> G_T and target -> G_T -> G_S),
forms per-image class prototypes on all four paths, combines the base
CycleGAN/segmentation objective with L_sim and L_cl, updates the generators,
then the discriminators, and finally stores the source-labelled prototypes
(c_s into B_s, c_{s->t} into B_t).
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .alignment import Prototype, argmax_supervision, compute_prototypes, confidence_mask, loss_sim
from .config import Config
from .data import CLASS_NAMES, DiskDataset, DomainSample, augment, load_dataset
from .metrics import (
    ClassMetrics,
    MetricRecord,
    class_metrics,
    emit_report,
    mean_defined,
    project_features_2d,
    summarize,
)
from .networks import PatchDiscriminator, SegModule
from .nn import Adam, ParameterSet, load_checkpoint, save_checkpoint
from .objectives import LossWeights, loss_all, loss_cycle, loss_lsgan, loss_seg
from .proto_dict import AggregationStrategy, FeatureDictionary, contributing_queries, loss_cl
from .tensor import Tensor

HISTORY_COLUMNS = (
    "epoch", "step", "total", "seg", "cycle", "adv_img", "adv_seg", "sim", "cl",
    "lambda1", "lambda2", "d_loss", "proposed_grad_norm", "protos_s", "protos_st", "dict_s", "dict_t",
)
STORABLE_DOMAINS = ("s", "s->t")


@dataclass
class TrainState:
    g_s: SegModule
    g_t: SegModule
    d_img_s: PatchDiscriminator
    d_img_t: PatchDiscriminator
    d_seg_s: PatchDiscriminator
    d_seg_t: PatchDiscriminator
    opt_g: Adam
    opt_d: Adam
    dict_s: FeatureDictionary
    dict_t: FeatureDictionary
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def generator_params(self) -> ParameterSet:
        return self.opt_g.params

    @property
    def discriminator_params(self) -> ParameterSet:
        return self.opt_d.params


def init_state(config: Config) -> TrainState:
    """Fresh networks, optimizers and empty dictionaries from one seed."""
    m, tr = config.model, config.train
    seeds = np.random.SeedSequence(tr.seed).generate_state(7)
    g_s = SegModule(m, "G_S", int(seeds[0]))
    g_t = SegModule(m, "G_T", int(seeds[1]))
    d_img_s = PatchDiscriminator(m, "D_img_S", 1, "image", int(seeds[2]))
    d_img_t = PatchDiscriminator(m, "D_img_T", 1, "image", int(seeds[3]))
    d_seg_s = PatchDiscriminator(m, "D_seg_S", m.num_classes, "segmentation", int(seeds[4]))
    d_seg_t = PatchDiscriminator(m, "D_seg_T", m.num_classes, "segmentation", int(seeds[5]))
    gen = g_s.params.merged(g_t.params)
    disc = d_img_s.params.merged(d_img_t.params).merged(d_seg_s.params).merged(d_seg_t.params)
    size, _ = config.dict.resolved(config.data.image_size)
    return TrainState(
        g_s, g_t, d_img_s, d_img_t, d_seg_s, d_seg_t,
        Adam(gen, tr.lr_g, tr.weight_decay),
        Adam(disc, tr.lr_d, tr.weight_decay),
        FeatureDictionary(m.num_classes, m.embed_depth, size),
        FeatureDictionary(m.num_classes, m.embed_depth, size),
        np.random.default_rng(int(seeds[6])),
    )


def prototype_classes(config: Config) -> list[int]:
    start = 0 if config.train.include_background else 1
    return list(range(start, config.model.num_classes))


def loss_weights(config: Config, epoch: int) -> LossWeights:
    """Weights for a 0-based epoch; the proposed terms are off during warm-up."""
    tr = config.train
    warm = epoch < tr.warmup_epochs
    return LossWeights(
        lambda1=0.0 if warm else tr.lambda1,
        lambda2=0.0 if warm else tr.lambda2,
        seg=tr.seg_weight,
        cycle=tr.cycle_weight,
        adv_img=tr.adv_img_weight,
        adv_seg=tr.adv_seg_weight,
    )


class _Path:
    """Per-image supervision and prototypes of one forward path."""

    def __init__(self, domain: str, output, config: Config, pseudo: bool):
        self.domain = domain
        self.embedding = output.embedding
        self.items = []
        classes = prototype_classes(config)
        for b in range(output.probs.shape[0]):
            probs = output.probs.data[b]
            sup = confidence_mask(probs, config.train.confidence_threshold) if pseudo else argmax_supervision(probs)
            emb = output.embedding[b]
            protos = compute_prototypes(emb, sup, classes, config.train.min_pixels, domain)
            self.items.append((emb, sup, protos))

    @property
    def prototypes(self) -> list[Prototype]:
        return [p for _, _, protos in self.items for p in protos]


def _mean(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return Tensor(np.zeros((), dtype=T.get_default_dtype()))
    return T.mean(T.stack(list(terms)))


def _combine(per_path: Sequence[Tensor], reduction: str) -> Tensor:
    if not per_path:
        return _mean([])
    if reduction == "mean":
        return _mean(per_path)
    total = per_path[0]
    for t in per_path[1:]:
        total = total + t
    return total


def similarity_term(paths: Sequence[_Path], reduction: str = "sum") -> Tensor:
    """L_sim over the four paths.

    Each path contributes the mean over its images that formed a prototype.
    ``sum`` adds the paths, like the per-path terms of L_base; ``mean``
    averages over every (path, image) pair instead.
    """
    if reduction == "mean":
        return _mean([loss_sim(emb, sup, protos) for p in paths for emb, sup, protos in p.items if protos])
    per_path = [_mean([loss_sim(emb, sup, protos) for emb, sup, protos in p.items if protos]) for p in paths
                if any(protos for _, _, protos in p.items)]
    return _combine(per_path, "sum")


def contrastive_term(pairings: Sequence[tuple[_Path, FeatureDictionary]], config: Config) -> Tensor:
    """L_cl per query pairing that has a contributing query, summed or averaged."""
    _, k = config.dict.resolved(config.data.image_size)
    strategy = AggregationStrategy(config.dict.aggregation, k)
    terms = []
    for path, dictionary in pairings:
        queries = path.prototypes
        if contributing_queries(queries, dictionary):
            terms.append(loss_cl(queries, dictionary, config.dict.tau, strategy))
    return _combine(terms, config.train.path_reduction)


def _detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _grad_norm(params: ParameterSet) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in params.grads().values()))


def train_step(
    state: TrainState,
    config: Config,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray,
    instrument: bool = False,
) -> dict:
    """One generator update, one discriminator update, then dictionary pushes.

    Target ground truth never enters this function. With ``instrument`` the
    gradient norm of lambda1 * L_sim + lambda2 * L_cl alone is recorded.
    """
    weights = loss_weights(config, state.epoch)
    xs, xt = Tensor(x_s), Tensor(x_t)
    if xs.shape[1:] != xt.shape[1:] or len(y_s) != xs.shape[0]:
        raise ValueError(f"inconsistent batch shapes: x_s {xs.shape}, y_s {np.shape(y_s)}, x_t {xt.shape}")

    # (1) both cycles
    out_s = state.g_s(xs)
    out_st = state.g_t(out_s.translated)
    out_t = state.g_t(xt)
    out_ts = state.g_s(out_t.translated)

    # (2) prototypes on all four paths; target paths use confidence-masked pseudo-labels
    p_s = _Path("s", out_s, config, pseudo=False)
    p_st = _Path("s->t", out_st, config, pseudo=False)
    p_t = _Path("t", out_t, config, pseudo=True)
    p_ts = _Path("t->s", out_ts, config, pseudo=True)

    # (3) losses
    base = {
        "seg": loss_seg(out_s.logits, y_s) + loss_seg(out_st.logits, y_s),
        "cycle": loss_cycle(xs, out_st.translated) + loss_cycle(xt, out_ts.translated),
        "adv_img": loss_lsgan(None, state.d_img_t(out_s.translated), "generator")
        + loss_lsgan(None, state.d_img_s(out_t.translated), "generator"),
        "adv_seg": loss_lsgan(None, state.d_seg_t(out_t.probs), "generator")
        + loss_lsgan(None, state.d_seg_s(out_ts.probs), "generator"),
    }
    dc = config.dict
    pairings = [
        (p, d)
        for p, d, on in (
            (p_s, state.dict_s, dc.query_source),
            (p_ts, state.dict_s, dc.query_target_to_source),
            (p_st, state.dict_t, dc.query_source_to_target),
            (p_t, state.dict_t, dc.query_target),
        )
        if on
    ]
    if weights.lambda1 or weights.lambda2:
        l_sim = similarity_term([p_s, p_st, p_t, p_ts], config.train.path_reduction)
        l_cl = contrastive_term(pairings, config)
    else:
        # warm-up or base-only: values are logged but kept out of the graph
        with T.no_grad():
            l_sim = similarity_term([p_s, p_st, p_t, p_ts], config.train.path_reduction)
            l_cl = contrastive_term(pairings, config)
    total = loss_all(base, l_sim, l_cl, weights)

    # (4) generators
    gen, disc = state.generator_params, state.discriminator_params
    proposed_norm = float("nan")
    if instrument:
        gen.zero_grad()
        proposed = None
        if weights.lambda1:
            proposed = weights.lambda1 * l_sim
        if weights.lambda2:
            term = weights.lambda2 * l_cl
            proposed = term if proposed is None else proposed + term
        if proposed is not None:
            T.backward(proposed)
        proposed_norm = _grad_norm(gen)
    gen.zero_grad()
    disc.zero_grad()
    T.backward(total)
    state.opt_g.step()

    # (5) discriminators on detached generator outputs
    disc.zero_grad()
    d_loss = float("nan")
    if state.epoch >= config.train.disc_start_epoch:
        d_total = (
            loss_lsgan(state.d_img_t(xt), state.d_img_t(_detach(out_s.translated)), "discriminator")
            + loss_lsgan(state.d_img_s(xs), state.d_img_s(_detach(out_t.translated)), "discriminator")
            + loss_lsgan(state.d_seg_t(_detach(out_st.probs)), state.d_seg_t(_detach(out_t.probs)), "discriminator")
            + loss_lsgan(state.d_seg_s(_detach(out_s.probs)), state.d_seg_s(_detach(out_ts.probs)), "discriminator")
        )
        if not math.isfinite(d_total.item()):
            raise FloatingPointError(f"discriminator loss is not finite ({d_total.item()})")
        T.backward(d_total)
        state.opt_d.step()
        d_loss = d_total.item()
    gen.zero_grad()

    # (6) store source-labelled prototypes only
    pushed_s, pushed_st = p_s.prototypes, p_st.prototypes
    for proto in pushed_s:
        state.dict_s.push(proto)
    for proto in pushed_st:
        state.dict_t.push(proto)
    for proto in pushed_s + pushed_st:
        if proto.domain not in STORABLE_DOMAINS:
            raise AssertionError(f"prototype tagged {proto.domain!r} reached a dictionary")

    record = {
        "epoch": state.epoch + 1,
        "step": state.step,
        "total": total.item(),
        **{k: v.item() for k, v in base.items()},
        "sim": l_sim.item(),
        "cl": l_cl.item(),
        "lambda1": weights.lambda1,
        "lambda2": weights.lambda2,
        "d_loss": d_loss,
        "proposed_grad_norm": proposed_norm,
        "protos_s": len(pushed_s),
        "protos_st": len(pushed_st),
        "dict_s": sum(state.dict_s.occupancies()),
        "dict_t": sum(state.dict_t.occupancies()),
    }
    state.step += 1
    state.history.append(record)
    return record


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def average_probabilities(p_t: np.ndarray, p_ts: np.ndarray) -> np.ndarray:
    return 0.5 * (np.asarray(p_t) + np.asarray(p_ts))


def infer(state: TrainState, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Class map and averaged probabilities of the target and target->source paths."""
    x = np.asarray(images, dtype=T.get_default_dtype())
    single = x.ndim == 3
    if single:
        x = x[None]
    probs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out_t = state.g_t(x[i : i + batch_size])
            out_ts = state.g_s(out_t.translated)
            probs.append(average_probabilities(out_t.probs.data, out_ts.probs.data))
    p = np.concatenate(probs)
    cls = p.argmax(axis=1)
    return (cls[0], p[0]) if single else (cls, p)


def evaluate(state: TrainState, images: np.ndarray, labels: np.ndarray, classes: Sequence[int]) -> list[ClassMetrics]:
    pred, _ = infer(state, images)
    per_sample = [class_metrics(p, g, classes) for p, g in zip(pred, labels)]
    return summarize(per_sample, classes)


def feature_projection(state: TrainState, images, labels, limit: int, seed: int = 0):
    """PCA coordinates of foreground target-path embeddings, labelled by ground truth."""
    with T.no_grad():
        emb = np.concatenate([state.g_t(images[i : i + 16]).embedding.data for i in range(0, len(images), 16)])
    vecs = emb.transpose(0, 2, 3, 1).reshape(-1, emb.shape[1])
    lab = np.asarray(labels).reshape(-1)
    fg = np.flatnonzero(lab > 0)
    if len(fg) < 3:
        return None
    if len(fg) > limit:
        fg = np.sort(np.random.default_rng(seed).choice(fg, size=limit, replace=False))
    names = np.array([CLASS_NAMES[c] for c in lab[fg]])
    return project_features_2d(vecs[fg]), names


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    records: list[MetricRecord]
    out_dir: Path
    seconds: float

    def final_metrics(self) -> list[ClassMetrics]:
        last = max(r.epoch for r in self.records)
        return [r.metrics for r in self.records if r.epoch == last]

    def final_dice(self) -> float | None:
        return mean_defined(m.dice for m in self.final_metrics())


def _check_dataset(data: DiskDataset, config: Config) -> None:
    n = config.data.image_size
    for name, arr in (("source images", data.source_images), ("target images", data.target_images),
                      ("test images", data.test_images)):
        if arr.ndim != 4 or arr.shape[1:] != (1, n, n):
            raise ValueError(f"{name} have shape {arr.shape}, expected (N, 1, {n}, {n})")
        if not np.isfinite(arr).all():
            raise ValueError(f"{name} contain non-finite values")
    if data.source_labels.max() >= config.model.num_classes or data.test_labels.max() >= config.model.num_classes:
        raise ValueError(f"labels exceed num_classes={config.model.num_classes}")
    if len(data.source_images) < config.train.batch_size or len(data.target_images) < config.train.batch_size:
        raise ValueError("fewer slices than one batch")


def _batch(images, labels, idx, rng, do_augment: bool, domain: str):
    xs, ys = [], []
    for i in idx:
        sample = DomainSample(images[i], None if labels is None else labels[i], domain, str(i))
        if do_augment:
            sample = augment(sample, rng)
        xs.append(sample.image)
        ys.append(sample.label)
    return np.stack(xs), (None if labels is None else np.stack(ys))


def write_history(history: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for rec in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})


def save_state(state: TrainState, config: Config, directory) -> Path:
    """Checkpoint directory: generator and discriminator parameters, dictionaries, config echo."""
    directory = Path(directory)
    save_checkpoint(state.generator_params, directory / "generators")
    save_checkpoint(state.discriminator_params, directory / "discriminators")
    state.dict_s.dump(directory / "dict_s")
    state.dict_t.dump(directory / "dict_t")
    config.write(directory / "config.ini")
    return directory


def load_state(config: Config, directory) -> TrainState:
    """Rebuild networks from ``config`` and load saved parameters into them."""
    directory = Path(directory)
    state = init_state(config)
    for params, sub in ((state.generator_params, "generators"), (state.discriminator_params, "discriminators")):
        if not (directory / sub / "manifest.json").exists():
            raise FileNotFoundError(f"no checkpoint manifest in {directory / sub}")
        saved = load_checkpoint(directory / sub)
        if saved.layout() != params.layout():
            raise ValueError(f"checkpoint {directory / sub} does not match the configured architecture")
        params.assign(saved.values())
    return state


def train(
    config: Config,
    data_dir,
    out_dir,
    instrument: bool = False,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run all epochs, evaluating on the held-out target slices after each one.

    Writes ``checkpoint/``, ``history.csv``, ``config.ini``, ``metrics.csv``,
    ``losses.svg`` and ``features.svg`` into ``out_dir``.
    """
    data = load_dataset(data_dir)
    _check_dataset(data, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out / "config.ini")
    start = time.perf_counter()

    state = init_state(config)
    tr = config.train
    classes = list(range(1, config.model.num_classes))
    n_steps = min(len(data.source_images), len(data.target_images)) // tr.batch_size
    records: list[MetricRecord] = []
    for epoch in range(tr.epochs):
        state.epoch = epoch
        perm_s = state.rng.permutation(len(data.source_images))
        perm_t = state.rng.permutation(len(data.target_images))
        for i in range(n_steps):
            sl = slice(i * tr.batch_size, (i + 1) * tr.batch_size)
            x_s, y_s = _batch(data.source_images, data.source_labels, perm_s[sl], state.rng, tr.augment, "source")
            x_t, _ = _batch(data.target_images, None, perm_t[sl], state.rng, tr.augment, "target")
            train_step(state, config, x_s, y_s, x_t, instrument=instrument)
        if (epoch + 1) % config.eval.eval_every == 0 or epoch + 1 == tr.epochs:
            summary = evaluate(state, data.test_images, data.test_labels, classes)
            records.extend(MetricRecord(epoch + 1, "target_test", m) for m in summary)
            if log:
                dice = mean_defined(m.dice for m in summary)
                log(f"epoch {epoch + 1}/{tr.epochs} target dice {dice:.4f} ({time.perf_counter() - start:.0f}s)")

    save_state(state, config, out / "checkpoint")
    write_history(state.history, out / "history.csv")
    projection = feature_projection(state, data.test_images, data.test_labels, config.eval.feature_points, tr.seed)
    emit_report(records, state.history, out, projection)
    return TrainResult(state, records, out, time.perf_counter() - start)


def evaluate_checkpoint(config: Config, checkpoint_dir, data_dir, out_dir) -> list[ClassMetrics]:
    """Score a saved checkpoint on the target test split and write the report files."""
    data = load_dataset(data_dir)
    _check_dataset(data, config)
    state = load_state(config, checkpoint_dir)
    classes = list(range(1, config.model.num_classes))
    summary = evaluate(state, data.test_images, data.test_labels, classes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out / "config.ini")
    projection = feature_projection(state, data.test_images, data.test_labels, config.eval.feature_points)
    emit_report([MetricRecord(0, "target_test", m) for m in summary], (), out, projection)
    return summary


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

# each cell is (row label, overrides)
GRIDS: dict[str, list[tuple[str, list[str]]]] = {
    "losses": [
        ("base", ["train.lambda1=0", "train.lambda2=0"]),
        ("base+sim", ["train.lambda2=0"]),
        ("base+sim+cl", []),
    ],
    "aggregation": [
        ("max_similarity", ["dict.aggregation=max_similarity"]),
        ("mean_all", ["dict.aggregation=mean_all"]),
        ("mean_top_k", ["dict.aggregation=mean_top_k"]),
    ],
}


def dict_size_grid(config: Config) -> list[tuple[str, list[str]]]:
    """Dictionary sizes around the resolved default, scaled like 200/400/600."""
    size, _ = config.dict.resolved(config.data.image_size)
    return [(f"S={s}", [f"dict.dict_size={s}"]) for s in (size // 2, size, size * 3 // 2)]


def resolve_grid(name: str, config: Config) -> list[tuple[str, list[str]]]:
    if name == "dict_size":
        return dict_size_grid(config)
    if name not in GRIDS:
        raise ValueError(f"unknown ablation grid {name!r}; choose from {sorted(GRIDS) + ['dict_size']}")
    return GRIDS[name]


@dataclass
class AblationRow:
    label: str
    per_seed: dict[int, list[ClassMetrics]]

    def mean_class(self, class_id: int, field_name: str) -> float | None:
        return mean_defined(
            getattr(m, field_name) for ms in self.per_seed.values() for m in ms if m.class_id == class_id
        )

    def seed_average(self, seed: int, field_name: str) -> float | None:
        return mean_defined(getattr(m, field_name) for m in self.per_seed[seed])

    def average(self, field_name: str) -> float | None:
        return mean_defined(self.seed_average(s, field_name) for s in self.per_seed)


def ablate(
    config: Config,
    data_dir,
    out_dir,
    grid: str | Sequence[tuple[str, list[str]]],
    seeds: Sequence[int] = (0,),
    log: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """One seeded training per (cell, seed); writes ``ablation_<grid>.csv``."""
    name = grid if isinstance(grid, str) else "custom"
    cells = resolve_grid(grid, config) if isinstance(grid, str) else list(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, overrides in cells:
        per_seed = {}
        for seed in seeds:
            cfg = config.with_overrides([*overrides, f"train.seed={seed}"])
            run_dir = out / name / f"{_slug(label)}_seed{seed}"
            result = train(cfg, data_dir, run_dir)
            per_seed[seed] = result.final_metrics()
            if log:
                log(f"{label} seed {seed}: dice {result.final_dice():.4f} ({result.seconds:.0f}s)")
        rows.append(AblationRow(label, per_seed))
    write_ablation_table(rows, out / f"ablation_{name}.csv", list(range(1, config.model.num_classes)))
    return rows


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label)


def write_ablation_table(rows: Sequence[AblationRow], path, classes: Sequence[int]) -> None:
    """Per-class and average Dice/ASD per row, plus per-seed averages."""
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in classes]

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *[f"dice_{n}" for n in names], "dice_avg", *[f"asd_{n}" for n in names], "asd_avg",
                    "seeds", "dice_per_seed", "asd_per_seed"])
        for row in rows:
            seeds = list(row.per_seed)
            w.writerow([
                row.label,
                *[fmt(row.mean_class(c, "dice")) for c in classes],
                fmt(row.average("dice")),
                *[fmt(row.mean_class(c, "asd")) for c in classes],
                fmt(row.average("asd")),
                ";".join(str(s) for s in seeds),
                ";".join(fmt(row.seed_average(s, "dice")) for s in seeds),
                ";".join(fmt(row.seed_average(s, "asd")) for s in seeds),
            ])
