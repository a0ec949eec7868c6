"""Data-driven context analyses: hourly category histograms, DTW between
trajectories, and 6-hour clip statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Corpus, local_hour
from .rng import stream

SIX_HOURS = 6 * 3600
PAIR_CAP = 100_000


def hourly_category_histogram(corpus: Corpus) -> np.ndarray:
    """Check-in counts per (high-level category, local hour of day)."""
    counts = np.zeros((corpus.registry.n_categories, 24), dtype=np.int64)
    if len(corpus.log):
        hours = local_hour(corpus.log.ts, corpus.log.tz)
        np.add.at(counts, (corpus.category, hours), 1)
    return counts


def dtw_distance(a: Sequence, b: Sequence) -> float:
    """Classic DTW: minimum summed Euclidean cost over monotone alignments."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW needs two non-empty sequences")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).tolist()
    m = len(b)
    prev = [math.inf] * (m + 1)
    prev[0] = 0.0
    for i in range(len(a)):
        row = [math.inf] * (m + 1)
        ci = cost[i]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = ci[j - 1] + best
        prev = row
        prev[0] = math.inf
    return float(prev[m])


@dataclass
class TrajClip:
    user: int
    rows: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


def clip_split(times: Sequence[int], gap: int = SIX_HOURS) -> list[np.ndarray]:
    """Cut a sorted timestamp sequence wherever consecutive visits are more
    than ``gap`` seconds apart.  Returns index arrays that partition the input."""
    t = np.asarray(times, dtype=np.int64)
    if len(t) == 0:
        return []
    cuts = np.flatnonzero(np.diff(t) > gap) + 1
    return np.split(np.arange(len(t)), cuts)


def corpus_clips(corpus: Corpus, gap: int = SIX_HOURS) -> list[TrajClip]:
    log = corpus.log
    clips = []
    for u in range(log.n_users):
        s, e = int(log.user_start[u]), int(log.user_start[u + 1])
        for idx in clip_split(log.ts[s:e], gap):
            clips.append(TrajClip(u, idx + s))
    return clips


def clip_distance_stats(clip_coords: Sequence[np.ndarray], cap: int = PAIR_CAP, seed: int = 0):
    """Mean pairwise distance of points within the same clip and across clips.

    Either value is ``None`` when no such pair exists.  Cross-clip pairs are
    sampled (``cap`` pairs, seeded) when there are more than ``cap``.
    """
    clip_coords = [np.asarray(c, dtype=np.float64).reshape(-1, 2) for c in clip_coords]
    intra_sum, intra_n = 0.0, 0
    for c in clip_coords:
        if len(c) > 1:
            d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
            iu = np.triu_indices(len(c), 1)
            intra_sum += d[iu].sum()
            intra_n += len(iu[0])
    sizes = np.array([len(c) for c in clip_coords])
    if len(sizes) == 0:
        return None, None
    total = sizes.sum()
    n_inter = (total * total - (sizes**2).sum()) // 2
    inter = None
    if n_inter > 0:
        pts = np.concatenate(clip_coords)
        owner = np.repeat(np.arange(len(sizes)), sizes)
        if n_inter <= cap:
            i, j = np.triu_indices(total, 1)
            keep = owner[i] != owner[j]
            i, j = i[keep], j[keep]
        else:
            rng = stream(seed, "inter-clip")
            i = np.empty(0, np.int64)
            j = np.empty(0, np.int64)
            while len(i) < cap:
                a = rng.integers(0, total, size=2 * cap)
                b = rng.integers(0, total, size=2 * cap)
                keep = owner[a] != owner[b]
                i = np.concatenate([i, a[keep]])
                j = np.concatenate([j, b[keep]])
            i, j = i[:cap], j[:cap]
        inter = float(np.sqrt(((pts[i] - pts[j]) ** 2).sum(-1)).mean())
    intra = intra_sum / intra_n if intra_n else None
    return intra, inter


def dtw_friend_vs_stranger(
    sequences: Sequence[np.ndarray], friends: Sequence[Sequence[int]], seed: int = 0, max_len: int | None = None
) -> tuple[float | None, float | None]:
    """Mean DTW from each user to their friends and to as many random strangers.

    ``sequences[u]`` is user ``u``'s coordinate sequence; ``max_len`` keeps
    only the most recent points.
    """
    seqs = [np.asarray(s)[-max_len:] if max_len else np.asarray(s) for s in sequences]
    n = len(seqs)
    rng = stream(seed, "strangers")
    fr_total, fr_n, st_total, st_n = 0.0, 0, 0.0, 0
    for u in range(n):
        fs = [j for j in friends[u] if j != u and len(seqs[j])]
        if not fs or not len(seqs[u]):
            continue
        strangers = np.array([j for j in range(n) if j != u and j not in set(friends[u]) and len(seqs[j])])
        for j in fs:
            fr_total += dtw_distance(seqs[u], seqs[j])
            fr_n += 1
        if len(strangers):
            picks = rng.choice(strangers, size=min(len(fs), len(strangers)), replace=False)
            for j in picks:
                st_total += dtw_distance(seqs[u], seqs[j])
                st_n += 1
    return (fr_total / fr_n if fr_n else None, st_total / st_n if st_n else None)


def user_sequences(corpus: Corpus) -> list[np.ndarray]:
    log = corpus.log
    return [corpus.xy[log.user_start[u] : log.user_start[u + 1]] for u in range(log.n_users)]


def write_histogram_csv(counts: np.ndarray, names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category"] + [f"h{h:02d}" for h in range(24)])
        for name, row in zip(names, counts):
            w.writerow([name] + [int(v) for v in row])


def write_stats_csv(stats: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "value"])
        for k, v in stats.items():
            w.writerow([k, "" if v is None else f"{v:.10f}"])
