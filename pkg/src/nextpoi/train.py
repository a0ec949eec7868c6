"""Losses, training loop, top-k evaluation, nearest-POI baseline and ablation runner."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import Corpus, DatasetSplit
from .diffcore import Tensor
from .model import (
    Batch,
    ModelConfig,
    Runtime,
    as_leaves,
    forward,
    init_params,
    make_batch,
    variant_config,
)
from .rng import stream
from .social import NeighborGraph, neighbor_index

log = logging.getLogger(__name__)

KS = (1, 5, 10, 20)
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def loss_poi(log_probs, targets) -> Tensor:
    """Mean negative log-likelihood of the target POIs.

    ``log_probs`` is ``(B, |P|)`` (a tensor from the network or a plain
    array); entries are floored at ``log(1e-12)``.
    """
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(np.log(np.maximum(np.asarray(log_probs, float), PROB_FLOOR)))
    lp2 = dc.reshape(lp, (-1, lp.shape[-1]))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    onehot = np.zeros(lp2.shape)
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = dc.sum_(dc.mul(lp2, onehot), axis=-1)
    return dc.mul(dc.mean(picked), -1.0)


def loss_traj(pred, target) -> Tensor:
    """Batch mean of ``(x_hat - x)^2 + (y_hat - y)^2``."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    return dc.mean(dc.squared_error(dc.reshape(pred, (-1, 2)), target.reshape(-1, 2)))


def loss_consistency(probs, pred, poi_xy) -> Tensor:
    """Squared distance between the predicted coordinate and the coordinate of
    the argmax POI.  The argmax coordinate is a constant: gradient reaches
    only ``pred``."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, np.shape(probs)[-1])
    inferred = np.asarray(poi_xy)[np.argmax(probs, axis=-1)]
    return loss_traj(pred, inferred)


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float
    batch_size: int


def total_loss(l1, l2, l3, theta: Sequence[float], batch_size: int = 1) -> tuple[Tensor | float, LossBreakdown]:
    """``theta1*l1 + theta2*l2 + theta3*l3``; terms with zero weight are skipped
    and reported as 0."""
    if any(t < 0 for t in theta):
        raise ValueError("loss weights must be non-negative")
    total = None
    parts = []
    for th, l in zip(theta, (l1, l2, l3)):
        if th == 0 or l is None:
            parts.append(0.0)
            continue
        val = l.item() if isinstance(l, Tensor) else float(l)
        parts.append(val)
        term = dc.mul(l, th) if isinstance(l, Tensor) else th * val
        total = term if total is None else total + term
    if total is None:
        total = 0.0
    tot_val = total.item() if isinstance(total, Tensor) else float(total)
    return total, LossBreakdown(parts[0], parts[1], parts[2], tot_val, batch_size)


def model_loss(P, batch: Batch, cfg: ModelConfig, poi_xy: np.ndarray, rt: Runtime | None = None):
    """Forward pass and the weighted loss; returns ``(total, breakdown, output)``."""
    out = forward(P, batch, cfg, rt)
    th = cfg.theta
    l1 = loss_poi(out.log_probs, batch.target_poi) if th[0] else None
    l2 = loss_traj(out.pred_xy, batch.target_xy) if th[1] else None
    l3 = loss_consistency(out.probs, out.pred_xy, poi_xy) if th[2] else None
    total, br = total_loss(l1, l2, l3, th, len(batch))
    return total, br, out


# ---------------------------------------------------------------- metrics


def target_ranks(scores: np.ndarray, targets) -> np.ndarray:
    """0-based rank of each target under descending score, ties by lower id."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    t = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    return (scores > t).sum(axis=1) + ((scores == t) & (ids < targets[:, None])).sum(axis=1)


def topk_accuracy(scores: np.ndarray, targets, ks: Iterable[int] = KS) -> dict[int, float]:
    """Fraction of rows whose target is among the ``k`` highest scores."""
    ranks = target_ranks(scores, targets)
    if len(ranks) == 0:
        return {k: 0.0 for k in ks}
    return {k: float(np.mean(ranks < k)) for k in ks}


def nearest_poi_scores(pred_xy: np.ndarray, poi_xy: np.ndarray) -> np.ndarray:
    """Negative Euclidean distance from each predicted coordinate to every POI."""
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    diff = pred_xy[:, None, :] - np.asarray(poi_xy)[None, :, :]
    return -np.sqrt((diff**2).sum(axis=-1))


def aux_only_predict(pred_xy, poi_xy) -> int | np.ndarray:
    """Nearest POI to the predicted coordinate (ties -> lowest id)."""
    scores = nearest_poi_scores(pred_xy, poi_xy)
    out = np.argmax(scores, axis=-1)
    return int(out[0]) if np.ndim(pred_xy) == 1 else out


def aux_only_ranking(pred_xy, poi_xy) -> np.ndarray:
    """POI ids sorted by distance to each predicted coordinate, ties by id."""
    scores = nearest_poi_scores(pred_xy, poi_xy)
    ids = np.broadcast_to(np.arange(scores.shape[1]), scores.shape)
    return np.lexsort((ids, -scores), axis=-1)


@dataclass
class EvalReport:
    acc1: float
    acc5: float
    acc10: float
    acc20: float
    mean_aux_dist: float
    mean_consistency_dist: float
    seed: int | None = None
    n: int = 0

    def accuracy(self, k: int) -> float:
        return getattr(self, f"acc{k}")

    def monotone(self) -> bool:
        return self.acc1 <= self.acc5 <= self.acc10 <= self.acc20


def evaluate(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    corpus: Corpus,
    targets: np.ndarray,
    nb_end: np.ndarray | None = None,
    batch_size: int = 512,
    seed: int | None = None,
    return_scores: bool = False,
):
    """Top-k accuracy and distance statistics over ``targets``.

    Models without the mobility branch are scored by nearest POI to the
    predicted coordinate.
    """
    P = as_leaves(params, requires_grad=False)
    poi_xy = corpus.registry.xy
    ranks, aux_d, con_d, all_scores = [], [], [], []
    with dc.no_grad():
        for s in range(0, len(targets), batch_size):
            sl = slice(s, s + batch_size)
            batch = make_batch(corpus, targets[sl], cfg.n, None if nb_end is None else nb_end[sl])
            out = forward(P, batch, cfg)
            pred = out.pred_xy.data
            scores = out.log_probs.data if cfg.use_mobility else nearest_poi_scores(pred, poi_xy)
            ranks.append(target_ranks(scores, batch.target_poi))
            aux_d.append(np.linalg.norm(pred - batch.target_xy, axis=-1))
            con_d.append(np.linalg.norm(pred - poi_xy[np.argmax(scores, axis=-1)], axis=-1))
            if return_scores:
                all_scores.append(scores)
    r = np.concatenate(ranks) if ranks else np.zeros(0)
    acc = {k: float(np.mean(r < k)) if len(r) else 0.0 for k in KS}
    rep = EvalReport(
        acc[1], acc[5], acc[10], acc[20],
        float(np.mean(np.concatenate(aux_d))) if aux_d else 0.0,
        float(np.mean(np.concatenate(con_d))) if con_d else 0.0,
        seed, len(r),
    )
    if return_scores:
        return rep, np.concatenate(all_scores) if all_scores else np.zeros((0, len(poi_xy)))
    return rep


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 512
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    variant: str = "full"
    n: int = 20
    eval_train: bool = False
    target_train_top1: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    final_params: dict[str, np.ndarray] | None = None


def neighbor_ends(corpus: Corpus, graph: NeighborGraph | None, targets: np.ndarray, cfg: ModelConfig):
    if not cfg.use_social or graph is None:
        return None
    return neighbor_index(corpus.log, graph, targets, cfg.n, cfg.k_max).end


def _metrics_line(epoch, split_name, rep: EvalReport | None, br: LossBreakdown | None, seed, variant) -> dict:
    line = {"epoch": epoch, "split": split_name}
    for k in KS:
        line[f"acc{k}"] = rep.accuracy(k) if rep else None
    for key in ("l1", "l2", "l3", "total"):
        line[key] = getattr(br, key) if br else None
    line["mean_aux_dist"] = rep.mean_aux_dist if rep else None
    line["mean_consistency_dist"] = rep.mean_consistency_dist if rep else None
    line["seed"] = seed
    line["variant"] = variant
    return line


def train(
    corpus: Corpus,
    splits: DatasetSplit,
    graph: NeighborGraph | None,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    params: Mapping[str, np.ndarray] | None = None,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with validation-based early stopping.

    Returns the parameters of the epoch with the best validation top-1.
    """
    seed = tcfg.seed
    if params is None:
        params = init_params(
            cfg, corpus.log.n_pois, corpus.registry.n_categories, corpus.log.n_users, stream(seed, "init")
        )
    params = {k: np.array(v) for k, v in params.items()}
    poi_xy = corpus.registry.xy
    train_t = splits.train
    val_t = splits.validation
    train_nb = neighbor_ends(corpus, graph, train_t, cfg)
    val_nb = neighbor_ends(corpus, graph, val_t, cfg)
    state = dc.AdamState(lr=tcfg.lr)
    rt = Runtime(train=True, rng=stream(seed, "dropout"))
    shuffle_rng = stream(seed, "shuffle")
    best = (-1.0, 0, {k: v.copy() for k, v in params.items()})
    history: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None
    stale = 0
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            order = shuffle_rng.permutation(len(train_t))
            sums = np.zeros(4)
            seen = 0
            for b, s in enumerate(range(0, len(order), tcfg.batch_size)):
                idx = order[s : s + tcfg.batch_size]
                batch = make_batch(corpus, train_t[idx], cfg.n, None if train_nb is None else train_nb[idx])
                P = as_leaves(params)
                total, br, _ = model_loss(P, batch, cfg, poi_xy, rt)
                if not np.isfinite(br.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
                if isinstance(total, Tensor):
                    total.backward()
                grads = {k: t.grad for k, t in P.items() if t.grad is not None}
                params, state = dc.adam_step(params, grads, state)
                sums += len(idx) * np.array([br.l1, br.l2, br.l3, br.total])
                seen += len(idx)
            mean = sums / max(seen, 1)
            br_epoch = LossBreakdown(*mean, batch_size=tcfg.batch_size)
            train_rep = evaluate(params, cfg, corpus, train_t, train_nb, seed=seed) if tcfg.eval_train else None
            val_rep = evaluate(params, cfg, corpus, val_t, val_nb, seed=seed)
            lines = [_metrics_line(epoch, "train", train_rep, br_epoch, seed, cfg.variant),
                     _metrics_line(epoch, "validation", val_rep, None, seed, cfg.variant)]
            for line in lines:
                history.append(line)
                if sink:
                    sink.write(json.dumps(line) + "\n")
                if on_epoch:
                    on_epoch(line)
            if val_rep.acc1 > best[0]:
                best = (val_rep.acc1, epoch, {k: v.copy() for k, v in params.items()})
                stale = 0
            else:
                stale += 1
            if train_rep is not None and tcfg.target_train_top1 is not None and train_rep.acc1 >= tcfg.target_train_top1:
                break
            if stale >= tcfg.patience:
                break
    finally:
        if sink:
            sink.close()
    return TrainResult(best[2], best[1], history, params)


# ---------------------------------------------------------------- ablations


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: EvalReport | None
    error: str | None = None


def run_ablation(
    variants: Sequence[str],
    seeds: Sequence[int],
    make_data: Callable[[int], tuple[Corpus, DatasetSplit, NeighborGraph | None]],
    base: ModelConfig,
    tcfg: TrainConfig,
    out_csv=None,
    split: str = "test",
) -> list[AblationRow]:
    """Train every (variant, seed) cell and score it on ``split``.

    ``make_data(seed)`` supplies the corpus for a seed, so all variants of a
    seed see the same data.  A failing cell records its error and the sweep
    continues.
    """
    rows: list[AblationRow] = []
    cache: dict[int, tuple] = {}
    for seed in seeds:
        for name in variants:
            try:
                if seed not in cache:
                    cache[seed] = make_data(seed)
                corpus, splits, graph = cache[seed]
                cfg = variant_config(name, base)
                res = train(corpus, splits, graph, cfg, dataclasses.replace(tcfg, seed=seed, variant=name))
                targets = getattr(splits, split)
                rep = evaluate(res.params, cfg, corpus, targets, neighbor_ends(corpus, graph, targets, cfg), seed=seed)
                rows.append(AblationRow(name, seed, rep))
            except Exception as exc:  # one failed cell must not abort the sweep
                log.error("ablation cell %s/seed %s failed: %s", name, seed, exc)
                rows.append(AblationRow(name, seed, None, repr(exc)))
    if out_csv is not None:
        write_results_csv(rows, out_csv)
    return rows


def write_results_csv(rows: Iterable[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "acc1", "acc5", "acc10", "acc20"])
        for r in rows:
            if r.report is None:
                w.writerow([r.variant, r.seed, "", "", "", ""])
            else:
                w.writerow([r.variant, r.seed] + [f"{r.report.accuracy(k):.6f}" for k in KS])


def summarize(rows: Iterable[AblationRow], stat: Callable = np.median) -> dict[str, dict[str, float]]:
    """Per-variant aggregate of every EvalReport field."""
    by: dict[str, list[EvalReport]] = {}
    for r in rows:
        if r.report is not None:
            by.setdefault(r.variant, []).append(r.report)
    keys = ("acc1", "acc5", "acc10", "acc20", "mean_aux_dist", "mean_consistency_dist")
    return {v: {k: float(stat([getattr(rep, k) for rep in reps])) for k in keys} for v, reps in by.items()}
