"""Command-line entry point: ingest, neighbors, synth, train, eval, ablate, analyze.

Settings come from a flat JSON ``--config`` file and ``--kebab-case`` flags;
flags override the file, which overrides the defaults in :class:`RunConfig`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis
from .data import CategoryScheme, ParseError, parse_checkins, train_mask
from .diffcore import load_checkpoint, save_checkpoint
from .model import VARIANTS, ModelConfig, desk_config, init_params, variant_config
from .pipeline import Dataset, load_dataset, prepare, save_dataset, synthetic_dataset
from .rng import stream
from .social import NeighborGraph, checkin_vectors, discover_neighbors, graph_from_edges, read_edges
from .synth import SynthConfig, friends_from_groups, generate, read_groups, write_synth
from .train import TrainConfig, evaluate, neighbor_ends, run_ablation, summarize, train

log = logging.getLogger("nextpoi")

NEIGHBORS_FILE = "neighbors.tsv"
CHECKPOINT_FILE = "checkpoint.zip"


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    # data
    data: str | None = None
    format: str = "foursquare"
    scheme: str = "foursquare"
    poi_categories: str | None = None
    dataset: str | None = None
    edges: str | None = None
    neighbors: str | None = None
    groups: str | None = None
    train_frac: float = 0.8
    val_frac: float = 0.1
    # model
    size: str = "desk"
    variant: str = "full"
    n: int = 20
    aux_input_len: int | None = None
    tau: float = 0.5
    k_max: int = 8
    dropout: float = 0.1
    # training
    lr: float = 1e-3
    batch_size: int = 512
    max_epochs: int = 200
    patience: int = 10
    eval_train: bool = False
    target_train_top1: float | None = None
    checkpoint: str | None = None
    split: str = "test"
    # ablation
    variants: str = ",".join(VARIANTS[:-1])
    seeds: str = "0,1,2,3,4"
    # synthetic generator
    n_users: int = 50
    n_pois: int = 100
    n_categories: int = 8
    n_groups: int = 10
    semantic_strength: float = 0.0
    social_strength: float = 0.0
    geo_strength: float = 0.0
    geo_radius: float = 0.3
    checkins_per_user: int = 40
    favorites: int = 10
    explore: float = 0.1
    # shared
    seed: int = 0
    out: str = "out"

    def model_config(self, variant: str | None = None) -> ModelConfig:
        dims = {"n": self.n, "aux_input_len": self.aux_input_len, "k_max": self.k_max, "dropout": self.dropout}
        if self.size == "desk":
            base = desk_config(**dims)
        elif self.size == "standard":
            base = ModelConfig(**dims)
        else:
            raise CliError(f"unknown model size {self.size!r} (desk or standard)")
        return variant_config(variant or self.variant, base)

    def train_config(self, variant: str | None = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            seed=self.seed, variant=variant or self.variant, n=self.n, eval_train=self.eval_train,
            target_train_top1=self.target_train_top1,
        )

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        values = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        values["seed"] = self.seed if seed is None else seed
        return SynthConfig(**values)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _kind(f: dataclasses.Field):
    t = str(f.type)
    if "bool" in t:
        return _parse_bool
    if "int" in t:
        return int
    if "float" in t:
        return float
    return str


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat settings")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        common.add_argument(_flag(f.name), dest=f.name, type=_kind(f), default=None, metavar=f.name.upper())
    parser = argparse.ArgumentParser(prog="nextpoi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("ingest", "parse a check-in file and write dataset artifacts"),
        ("neighbors", "discover (or load) the user neighbour graph"),
        ("synth", "generate a synthetic corpus with planted signals"),
        ("train", "train a model variant and write the best checkpoint"),
        ("eval", "evaluate a checkpoint (or a random init) on a split"),
        ("ablate", "train and test every (variant, seed) cell"),
        ("analyze", "hourly category, clip distance and DTW tables"),
    ):
        sub.add_parser(name, parents=[common], help=doc, description=doc)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        for key, val in loaded.items():
            key = key.replace("-", "_")
            if key not in known:
                raise CliError(f"unknown config key {key!r}")
            values[key] = val
    for f in fields(RunConfig):
        val = getattr(args, f.name)
        if val is not None:
            values[f.name] = val
    return RunConfig(**values)


# ---------------------------------------------------------------- helpers


def _scheme(rc: RunConfig) -> CategoryScheme:
    if rc.scheme in ("foursquare", "arcgis"):
        return CategoryScheme.builtin(rc.scheme)
    return CategoryScheme.from_file(rc.scheme)


def _poi_categories(path: str | None) -> dict[str, str] | None:
    if not path:
        return None
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) >= 2:
            out[parts[0].strip()] = parts[1].strip()
    return out


def _out(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(rc: RunConfig) -> tuple[Dataset, dict]:
    if not rc.dataset:
        raise CliError("--dataset DIR (an ingest output directory) is required")
    try:
        return load_dataset(rc.dataset)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


def _graph(rc: RunConfig, ds: Dataset) -> NeighborGraph:
    """Neighbour graph from --neighbors, the dataset's own export, --edges, or similarity."""
    candidates = [rc.neighbors] if rc.neighbors else [str(Path(rc.dataset) / NEIGHBORS_FILE)]
    for path in candidates:
        if path and Path(path).is_file():
            return NeighborGraph.load_export(path, ds.log.n_users)
    if rc.neighbors:
        raise CliError(f"neighbour graph {rc.neighbors} not found")
    return _discover(rc, ds)


def _discover(rc: RunConfig, ds: Dataset) -> NeighborGraph:
    log_ = ds.log
    rows = np.flatnonzero(_train_rows(ds, rc))
    vectors = checkin_vectors(log_, rows)
    if rc.edges:
        return graph_from_edges(read_edges(rc.edges), log_.n_users, log_.user_keys, vectors)
    return discover_neighbors(vectors, rc.tau)


def _train_rows(ds: Dataset, rc: RunConfig) -> np.ndarray:
    return train_mask(ds.log, rc.train_frac)


def _meta(rc: RunConfig, cfg: ModelConfig, ds: Dataset, fp: str) -> dict:
    return {
        "model": cfg.to_dict(),
        "dataset_fingerprint": fp,
        "n_users": ds.log.n_users,
        "n_pois": ds.log.n_pois,
        "n_categories": ds.corpus.registry.n_categories,
        "seed": rc.seed,
    }


def _report_dict(rep) -> dict:
    return dataclasses.asdict(rep)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_ingest(rc: RunConfig) -> int:
    if not rc.data:
        raise CliError("--data PATH is required")
    try:
        log_ = parse_checkins(rc.data, rc.format, _poi_categories(rc.poi_categories))
    except ParseError as exc:
        raise CliError(str(exc)) from exc
    if len(log_) == 0:
        raise CliError("no check-ins parsed")
    ds = prepare(log_, _scheme(rc), rc.n, None, rc.train_frac, rc.val_frac)
    out = _out(rc)
    save_dataset(ds, out, {"source": Path(rc.data).name, "format": rc.format, "scheme": rc.scheme})
    s = ds.summary()
    print(
        f"users {s['users']}  pois {s['pois']}  check-ins {s['checkins']}  "
        f"windows train {s['windows_train']} validation {s['windows_validation']} test {s['windows_test']}"
    )
    if log_.malformed:
        print(f"skipped {log_.malformed} malformed lines", file=sys.stderr)
    return 0


def cmd_neighbors(rc: RunConfig) -> int:
    ds, _ = _load(rc)
    graph = _discover(rc, ds)
    out = _out(rc)
    graph.export(out / NEIGHBORS_FILE)
    edges = len(graph.edges())
    print(f"{edges} undirected edges over {ds.log.n_users} users -> {out / NEIGHBORS_FILE}")
    return 0


def cmd_synth(rc: RunConfig) -> int:
    data = generate(rc.synth_config())
    corpus, groups = write_synth(data, _out(rc))
    print(f"{len(data.log)} check-ins -> {corpus}; groups -> {groups}")
    return 0


def cmd_train(rc: RunConfig) -> int:
    ds, meta = _load(rc)
    fp = meta["fingerprint"]
    cfg = rc.model_config()
    graph = _graph(rc, ds) if cfg.use_social else None
    params = None
    if rc.checkpoint:
        params = _checked_params(rc.checkpoint, fp)
    out = _out(rc)
    result = train(ds.corpus, ds.splits, graph, cfg, rc.train_config(), params, metrics_path=out / "metrics.jsonl")
    save_checkpoint(out / CHECKPOINT_FILE, result.params, {**_meta(rc, cfg, ds, fp), "best_epoch": result.best_epoch})
    last = [h for h in result.history if h["split"] == "train"][-1] if result.history else None
    val = [h for h in result.history if h["split"] == "validation"]
    msg = f"variant {cfg.variant}  best epoch {result.best_epoch}"
    if val:
        msg += f"  best validation top-1 {max(h['acc1'] for h in val):.4f}"
    if last and last["acc1"] is not None:
        msg += f"  final train top-1 {last['acc1']:.4f}"
    print(msg)
    return 0


def _checked_params(path: str, fp: str) -> dict:
    try:
        arrays, meta = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from exc
    ck_fp = (meta or {}).get("dataset_fingerprint")
    if ck_fp != fp:
        raise CliError(f"checkpoint fingerprint {ck_fp} does not match dataset fingerprint {fp}")
    return arrays


def cmd_eval(rc: RunConfig) -> int:
    ds, meta = _load(rc)
    fp = meta["fingerprint"]
    if rc.checkpoint:
        params = _checked_params(rc.checkpoint, fp)
        _, ck_meta = load_checkpoint(rc.checkpoint)
        cfg = ModelConfig.from_dict(ck_meta["model"])
    else:
        cfg = rc.model_config()
        params = init_params(
            cfg, ds.log.n_pois, ds.corpus.registry.n_categories, ds.log.n_users, stream(rc.seed, "init")
        )
    if rc.split not in ("train", "validation", "test"):
        raise CliError(f"unknown split {rc.split!r}")
    targets = getattr(ds.splits, rc.split)
    graph = _graph(rc, ds) if cfg.use_social else None
    rep = evaluate(params, cfg, ds.corpus, targets, neighbor_ends(ds.corpus, graph, targets, cfg), seed=rc.seed)
    out = _out(rc)
    _dump({"split": rc.split, "variant": cfg.variant, **_report_dict(rep)}, out / "eval.json")
    print(
        f"{rc.split} ({rep.n} windows)  top-1 {rep.acc1:.4f}  top-5 {rep.acc5:.4f}  "
        f"top-10 {rep.acc10:.4f}  top-20 {rep.acc20:.4f}"
    )
    return 0


def cmd_ablate(rc: RunConfig) -> int:
    variants = [v.strip() for v in rc.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
    seeds = [int(s) for s in rc.seeds.split(",") if s.strip()]
    if rc.dataset:
        ds, _ = _load(rc)
        graph = _graph(rc, ds)

        def make_data(seed):
            return ds.corpus, ds.splits, graph
    else:
        def make_data(seed):
            d = synthetic_dataset(rc.synth_config(seed), rc.n, rc.tau)
            return d.corpus, d.splits, d.graph

    out = _out(rc)
    rows = run_ablation(variants, seeds, make_data, rc.model_config(variants[0]), rc.train_config(), out / "results.csv")
    _dump(summarize(rows), out / "summary.json")
    failed = [r for r in rows if r.report is None]
    print(f"{len(rows) - len(failed)} of {len(rows)} cells trained -> {out / 'results.csv'}")
    for r in failed:
        print(f"cell {r.variant}/seed {r.seed} failed: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_analyze(rc: RunConfig) -> int:
    ds, _ = _load(rc)
    out = _out(rc)
    corpus = ds.corpus
    counts = analysis.hourly_category_histogram(corpus)
    analysis.write_histogram_csv(counts, corpus.registry.category_names, out / "hourly_categories.csv")
    clips = analysis.corpus_clips(corpus)
    intra, inter = analysis.clip_distance_stats([corpus.xy[c.rows] for c in clips], seed=rc.seed)
    stats = {"clips": float(len(clips)), "intra_clip_mean": intra, "inter_clip_mean": inter}
    friends = None
    if rc.groups:
        friends = friends_from_groups(read_groups(rc.groups)[_group_order(ds)])
    elif rc.edges:
        g = graph_from_edges(read_edges(rc.edges), ds.log.n_users, ds.log.user_keys)
        friends = g.neighbors
    if friends is not None:
        fr, st = analysis.dtw_friend_vs_stranger(analysis.user_sequences(corpus), friends, seed=rc.seed)
        stats["dtw_friend_mean"] = fr
        stats["dtw_stranger_mean"] = st
    analysis.write_stats_csv(stats, out / "distance_stats.csv")
    print(f"{len(clips)} clips; intra {_fmt(intra)}  inter {_fmt(inter)}" + (
        f"; DTW friend {_fmt(stats['dtw_friend_mean'])}  stranger {_fmt(stats['dtw_stranger_mean'])}"
        if friends is not None else ""
    ))
    return 0


def _group_order(ds: Dataset) -> np.ndarray:
    """Map dense user ids to the raw integer ids used by the groups file."""
    try:
        return np.array([int(k) for k in ds.log.user_keys], dtype=np.int64)
    except ValueError as exc:
        raise CliError("groups file needs integer user ids") from exc


def _fmt(v) -> str:
    return "none" if v is None else f"{v:.4f}"


COMMANDS = {
    "ingest": cmd_ingest,
    "neighbors": cmd_neighbors,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        rc = resolve_config(args)
        return COMMANDS[args.command](rc)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
