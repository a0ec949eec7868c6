"""Shared fixtures: a tiny hand-built corpus for gradient checks and the
standard synthetic fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from nextpoi.data import CategoryScheme, CheckInLog, Corpus, build_poi_registry
from nextpoi.model import ModelConfig, init_params, make_batch
from nextpoi.rng import stream

TINY_SCHEME = CategoryScheme("tiny", ("A", "B", "C"), {"a": "A", "b": "B", "c": "C"})


def tiny_config(**over) -> ModelConfig:
    base = ModelConfig(
        d_model=16, d_poi=8, d_cat=4, d_time=4, n_layers=2, n_heads=2, d_ff=16,
        dropout=0.0, d_user=4, k_max=1, n=5,
    )
    return base.replace(**over)


def tiny_corpus(seed: int = 0) -> Corpus:
    """Two users, 20 POIs (each visited once), 3 categories (+ Other), 10 check-ins each."""
    rng = np.random.default_rng(seed)
    rows = 10
    users = ["0"] * rows + ["1"] * rows
    pois = [str(p) for p in rng.permutation(20)]
    ts = np.concatenate([1_300_000_000 + 3600 * np.arange(rows) * 3 + 60 * k for k in range(2)])
    poi_xy = rng.uniform(-1, 1, size=(20, 2))
    lat = [40.0 + 0.1 * poi_xy[int(p), 0] for p in pois]
    lon = [-74.0 + 0.1 * poi_xy[int(p), 1] for p in pois]
    cats = ["abc"[int(p) % 3] for p in pois]
    log = CheckInLog.from_raw(users, pois, ts, lat, lon, [0] * len(users), cats)
    reg = build_poi_registry(log, TINY_SCHEME, np.arange(len(log)))
    return Corpus(log, reg)


def tiny_batch(corpus: Corpus, cfg: ModelConfig):
    """User 0's last two windows; user 1 (rows 12..16, all before the
    cutoff) is the single neighbour of the first, the second has none."""
    targets = np.array([8, 9])
    nb_end = np.array([[17], [-1]])
    return make_batch(corpus, targets, cfg.n, nb_end)


def tiny_params(cfg: ModelConfig, corpus: Corpus, seed: int = 0) -> dict:
    return init_params(cfg, corpus.log.n_pois, corpus.registry.n_categories, corpus.log.n_users,
                       stream(seed, "init"), emb_scale=0.5)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    corpus = tiny_corpus()
    return cfg, corpus, tiny_batch(corpus, cfg), tiny_params(cfg, corpus)


def brute_force_dtw(a, b, paths: list | None = None) -> float:
    """Minimum over every monotone alignment path, enumerated explicitly.

    Costs are accumulated in path order so the result is comparable
    bit-for-bit with a dynamic-programming evaluation."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    best = [np.inf]

    def walk(i, j, acc, path):
        acc = float(np.sqrt(((a[i] - b[j]) ** 2).sum())) + acc
        path = path + [(i, j)]
        if i == len(a) - 1 and j == len(b) - 1:
            best[0] = min(best[0], acc)
            if paths is not None:
                paths.append(path)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < len(a) and j + dj < len(b):
                walk(i + di, j + dj, acc, path)

    walk(0, 0, 0.0, [])
    return best[0]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
