"""Assembly of a ready-to-train dataset (corpus, splits, neighbour graph) and
its on-disk form."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CategoryScheme, CheckInLog, Corpus, DatasetSplit, PoiRegistry, build_poi_registry, split, train_mask
from .social import NeighborGraph, checkin_vectors, discover_neighbors
from .synth import SynthConfig, generate

LOG_FILE = "checkins.tsv"
USERS_FILE = "users.tsv"
POIS_FILE = "pois.tsv"
SPLIT_FILE = "splits.tsv"
META_FILE = "dataset.json"


@dataclass
class Dataset:
    corpus: Corpus
    splits: DatasetSplit
    graph: NeighborGraph | None = None

    @property
    def log(self) -> CheckInLog:
        return self.corpus.log

    def summary(self) -> dict:
        return {**self.log.summary(), **{f"windows_{k}": v for k, v in self.splits.counts().items()}}


def prepare(
    log: CheckInLog,
    scheme: CategoryScheme | None = None,
    n: int = 20,
    tau: float | None = 0.5,
    train_frac: float = 0.8,
    val_frac_of_train: float = 0.1,
    graph: NeighborGraph | None = None,
) -> Dataset:
    """Registry fitted on the training rows, window splits, and (unless
    ``graph`` is given or ``tau`` is None) the similarity neighbour graph."""
    rows = np.flatnonzero(train_mask(log, train_frac))
    registry = build_poi_registry(log, scheme or CategoryScheme.builtin("foursquare"), rows)
    corpus = Corpus(log, registry)
    splits = split(log, train_frac, val_frac_of_train, n)
    if graph is None and tau is not None:
        graph = discover_neighbors(checkin_vectors(log, rows), tau)
    return Dataset(corpus, splits, graph)


def synthetic_dataset(cfg: SynthConfig, n: int = 20, tau: float | None = 0.5) -> Dataset:
    return prepare(generate(cfg).log, n=n, tau=tau)


def fingerprint(ds: Dataset) -> str:
    """Content hash of the densified log and registry (stable across runs)."""
    h = hashlib.sha256()
    log, reg = ds.log, ds.corpus.registry
    for arr in (log.user, log.poi, log.ts, log.lat, log.lon, log.tz, reg.xy, reg.category):
        h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    h.update(json.dumps([reg.category_names, list(reg.bounds), ds.splits.n]).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- disk form


def save_dataset(ds: Dataset, out_dir, extra: dict | None = None) -> Path:
    """Write the densified tables, registry, split manifest and metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log, reg = ds.log, ds.corpus.registry
    (out / LOG_FILE).write_text("".join(
        f"{log.user[r]}\t{log.poi[r]}\t{log.ts[r]}\t{float(log.lat[r])!r}\t{float(log.lon[r])!r}\t{log.tz[r]}\t{log.raw_category[r]}\n"
        for r in range(len(log))
    ), encoding="utf-8")
    (out / USERS_FILE).write_text("".join(f"{i}\t{k}\n" for i, k in enumerate(log.user_keys)), encoding="utf-8")
    (out / POIS_FILE).write_text("".join(
        f"{i}\t{k}\t{float(reg.lat[i])!r}\t{float(reg.lon[i])!r}\t{float(reg.xy[i, 0])!r}\t{float(reg.xy[i, 1])!r}\t{reg.category_names[reg.category[i]]}\n"
        for i, k in enumerate(log.poi_keys)
    ), encoding="utf-8")
    parts = [("train", ds.splits.train), ("validation", ds.splits.validation), ("test", ds.splits.test)]
    (out / SPLIT_FILE).write_text(
        "".join(f"{r}\t{name}\n" for name, rows in parts for r in rows), encoding="utf-8"
    )
    meta = {
        "fingerprint": fingerprint(ds),
        "summary": ds.summary(),
        "n": ds.splits.n,
        "categories": list(reg.category_names),
        "bounds": list(reg.bounds),
        "malformed": log.malformed,
        "unknown_categories": dict(sorted(reg.unknown_categories.items())),
        **(extra or {}),
    }
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(in_dir) -> tuple[Dataset, dict]:
    """Inverse of :func:`save_dataset` (the neighbour graph is not included)."""
    d = Path(in_dir)
    missing = [f for f in (LOG_FILE, USERS_FILE, POIS_FILE, SPLIT_FILE, META_FILE) if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{d} is missing ingestion artifacts: {', '.join(missing)}")
    meta = json.loads((d / META_FILE).read_text())
    rows = [line.split("\t") for line in (d / LOG_FILE).read_text(encoding="utf-8").splitlines()]
    user_keys = [line.split("\t", 1)[1] for line in (d / USERS_FILE).read_text(encoding="utf-8").splitlines()]
    pois = [line.split("\t") for line in (d / POIS_FILE).read_text(encoding="utf-8").splitlines()]
    col = lambda k, t: np.array([t(r[k]) for r in rows], dtype=np.float64 if t is float else np.int64)  # noqa: E731
    log = CheckInLog(
        user=col(0, int), poi=col(1, int), ts=col(2, int), lat=col(3, float), lon=col(4, float), tz=col(5, int),
        raw_category=[r[6] for r in rows], user_keys=user_keys, poi_keys=[p[1] for p in pois],
        malformed=meta.get("malformed", 0),
    )
    names = tuple(meta["categories"])
    index = {c: i for i, c in enumerate(names)}
    registry = PoiRegistry(
        lat=np.array([float(p[2]) for p in pois]),
        lon=np.array([float(p[3]) for p in pois]),
        xy=np.array([[float(p[4]), float(p[5])] for p in pois]).reshape(-1, 2),
        category=np.array([index[p[6]] for p in pois], dtype=np.int64),
        category_names=names,
        bounds=tuple(meta["bounds"]),
        unknown_categories=Counter(meta.get("unknown_categories", {})),
    )
    parts: dict[str, list[int]] = {"train": [], "validation": [], "test": []}
    for line in (d / SPLIT_FILE).read_text().splitlines():
        r, name = line.split("\t")
        parts[name].append(int(r))
    arr = {k: np.array(v, dtype=np.int64) for k, v in parts.items()}
    ds = Dataset(Corpus(log, registry), DatasetSplit(arr["train"], arr["validation"], arr["test"], meta["n"]))
    return ds, meta
