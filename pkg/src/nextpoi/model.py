"""Context-aware next-POI network.

Every function works on a batch: sequences are ``(B, n)`` id arrays and
features are ``(B, d)`` tensors.  Parameters live in a flat ``dict`` of
named float64 arrays; the forward functions take the same dict wrapped
as :class:`~nextpoi.diffcore.Tensor` leaves.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .data import N_SLOTS, Corpus
from .diffcore import Tensor

MASK_BIAS = -1e30


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    d_poi: int = 80
    d_cat: int = 24
    d_time: int = 24
    n_layers: int = 2
    n_heads: int = 8
    d_ff: int = 256
    dropout: float = 0.1
    d_user: int = 40
    k_max: int = 8
    n: int = 20
    aux_input_len: int | None = None
    use_semantic: bool = True
    use_social: bool = True
    use_aux: bool = True
    use_mobility: bool = True
    theta: tuple[float, float, float] = (1.0, 1.0, 1.0)
    variant: str = "full"

    def __post_init__(self):
        if self.d_poi + self.d_cat + self.d_time != self.d_model:
            raise ValueError(
                f"d_poi + d_cat + d_time = {self.d_poi + self.d_cat + self.d_time}, expected d_model={self.d_model}"
            )
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by {self.n_heads} heads")
        if self.aux_input_len not in (None, self.n, self.n - 1):
            raise ValueError("aux_input_len must be n or n - 1")
        if any(t < 0 for t in self.theta):
            raise ValueError("loss weights must be non-negative")

    @property
    def aux_len(self) -> int:
        return self.n if self.aux_input_len is None else self.aux_input_len

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["theta"] = list(self.theta)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if "theta" in d:
            d["theta"] = tuple(d["theta"])
        return cls(**d)


# name -> (semantic, geo, social, theta)
_VARIANTS = {
    "V0": (False, False, False, (1.0, 0.0, 0.0)),
    "V1": (True, False, False, (1.0, 0.0, 0.0)),
    "V2": (True, True, False, (1.0, 0.0, 0.0)),
    "V3": (True, True, False, (1.0, 1.0, 0.0)),
    "V4": (True, True, False, (1.0, 0.0, 1.0)),
    "V5": (True, True, False, (1.0, 1.0, 1.0)),
    "full": (True, True, True, (1.0, 1.0, 1.0)),
}
VARIANTS = tuple(_VARIANTS) + ("aux-tra",)


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Ablation variant wiring on top of ``base`` dimensions.

    ``aux-tra`` is the auxiliary-only baseline: geographic branch plus user
    embedding, trained on the trajectory loss and scored by nearest POI.
    """
    base = base or ModelConfig()
    if name == "aux-tra":
        return base.replace(
            use_semantic=False, use_social=False, use_aux=True, use_mobility=False,
            theta=(0.0, 1.0, 0.0), variant=name,
        )
    if name not in _VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    sem, geo, soc, theta = _VARIANTS[name]
    return base.replace(
        use_semantic=sem, use_aux=geo, use_social=soc, use_mobility=True, theta=theta, variant=name
    )


def desk_config(**overrides) -> ModelConfig:
    """Scaled-down dimensions (d_model=64) for laptop-scale experiments."""
    cfg = ModelConfig(d_model=64, d_poi=40, d_cat=12, d_time=12, n_heads=4, d_ff=128, d_user=16)
    return cfg.replace(**overrides)


# ---------------------------------------------------------------- parameters


def _xavier(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _encoder_params(rng, prefix, cfg, out):
    d, f = cfg.d_model, cfg.d_ff
    for l in range(cfg.n_layers):
        p = f"{prefix}.{l}"
        for ln in ("ln1", "ln2"):
            out[f"{p}.{ln}.g"] = np.ones(d)
            out[f"{p}.{ln}.b"] = np.zeros(d)
        _attn_params(rng, f"{p}.attn", d, out)
        out[f"{p}.ff.w1"] = _xavier(rng, d, f)
        out[f"{p}.ff.b1"] = np.zeros(f)
        out[f"{p}.ff.w2"] = _xavier(rng, f, d)
        out[f"{p}.ff.b2"] = np.zeros(d)
    out[f"{prefix}.ln.g"] = np.ones(d)
    out[f"{prefix}.ln.b"] = np.zeros(d)


def _attn_params(rng, prefix, d, out):
    # no key bias: it shifts every score of a query equally, so softmax ignores it
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = _xavier(rng, d, d)
        if w != "k":
            out[f"{prefix}.b{w}"] = np.zeros(d)


def _mlp_params(rng, prefix, d_in, d_hidden, d_out, out):
    out[f"{prefix}.w1"] = _xavier(rng, d_in, d_hidden)
    out[f"{prefix}.b1"] = np.zeros(d_hidden)
    out[f"{prefix}.w2"] = _xavier(rng, d_hidden, d_out)
    out[f"{prefix}.b2"] = np.zeros(d_out)


def init_params(cfg: ModelConfig, n_pois: int, n_categories: int, n_users: int, rng: np.random.Generator,
                emb_scale: float = 0.3) -> dict[str, np.ndarray]:
    d = cfg.d_model
    p: dict[str, np.ndarray] = {
        "emb.poi": rng.normal(0, emb_scale, (n_pois, cfg.d_poi)),
        "emb.cat": rng.normal(0, emb_scale, (n_categories, cfg.d_cat)),
        "emb.time": rng.normal(0, emb_scale, (N_SLOTS, cfg.d_time)),
        "emb.user": rng.normal(0, emb_scale, (n_users, cfg.d_user)),
        "loc.w": _xavier(rng, 2, d),
        "loc.b": np.zeros(d),
    }
    _encoder_params(rng, "mob", cfg, p)
    _encoder_params(rng, "geo", cfg, p)
    _attn_params(rng, "social", d, p)
    p["fuse.w"] = _xavier(rng, 2 * d + cfg.d_user, d)
    p["fuse.b"] = np.zeros(d)
    _mlp_params(rng, "mlp_f", d, d, n_pois, p)
    _mlp_params(rng, "mlp_g", d, d, 2, p)
    return p


def param_shapes_ok(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> bool:
    return params["emb.poi"].shape[1] == cfg.d_poi and params["fuse.b"].shape == (cfg.d_model,)


# ---------------------------------------------------------------- building blocks


@functools.lru_cache(maxsize=32)
def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: ``PE[pos, 2i] = sin(pos / 10000^(2i/d))``, odd dims cosine.

    The returned array is shared between calls and read-only."""
    if n < 1 or d < 1 or d % 2:
        raise ValueError("need n >= 1 and an even d >= 2")
    pos = np.arange(n)[:, None]
    div = 10000.0 ** (np.arange(0, d, 2) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    pe.flags.writeable = False
    return pe


def _heads(x: Tensor, h: int) -> Tensor:
    B, S, d = x.shape
    return dc.transpose(dc.reshape(x, (B, S, h, d // h)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    B, h, S, dk = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (B, S, h * dk))


def multi_head_attention(P, prefix: str, q_in: Tensor, kv_in: Tensor, n_heads: int, bias=None):
    """Returns the projected output ``(B, Sq, d)`` and weights ``(B, h, Sq, Sk)``."""
    q = _heads(dc.linear(q_in, P[f"{prefix}.wq"], P[f"{prefix}.bq"]), n_heads)
    k = _heads(dc.linear(kv_in, P[f"{prefix}.wk"]), n_heads)
    v = _heads(dc.linear(kv_in, P[f"{prefix}.wv"], P[f"{prefix}.bv"]), n_heads)
    att, w = dc.attention(q, k, v, bias)
    return dc.linear(_merge(att), P[f"{prefix}.wo"], P[f"{prefix}.bo"]), w


@dataclass
class Runtime:
    """Per-call switches: dropout mode/RNG and optional attention capture."""

    train: bool = False
    rng: np.random.Generator | None = None
    capture: list | None = None

    def drop(self, x: Tensor, p: float) -> Tensor:
        return dc.dropout(x, p, self.rng, self.train)


def encode(P, prefix: str, x: Tensor, cfg: ModelConfig, rt: Runtime, bias=None) -> Tensor:
    """Pre-norm Transformer encoder; returns the final-position output ``(B, d)``.

    The last layer only evaluates the query at the final position, which is
    all the caller reads.  ``bias`` is an additive key mask ``(B, 1, 1, n)``.
    """
    for l in range(cfg.n_layers):
        p = f"{prefix}.{l}"
        last = l == cfg.n_layers - 1
        y = dc.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
        q_in = y[:, -1:, :] if last else y
        a, w = multi_head_attention(P, f"{p}.attn", q_in, y, cfg.n_heads, bias)
        if rt.capture is not None:
            rt.capture.append(w.data)
        x = (x[:, -1:, :] if last else x) + rt.drop(a, cfg.dropout)
        y = dc.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        ff = dc.linear(dc.relu(dc.linear(y, P[f"{p}.ff.w1"], P[f"{p}.ff.b1"])), P[f"{p}.ff.w2"], P[f"{p}.ff.b2"])
        x = x + rt.drop(ff, cfg.dropout)
    out = dc.layer_norm(x, P[f"{prefix}.ln.g"], P[f"{prefix}.ln.b"])
    return dc.reshape(out[:, -1:, :], (out.shape[0], cfg.d_model))


def embed_steps(P, poi, cat, slot, cfg: ModelConfig) -> Tensor:
    """Concatenated POI / category / time embeddings, ``(..., d_model)``.

    Without semantic input the category block is zero.
    """
    e_p = dc.take_rows(P["emb.poi"], poi)
    e_t = dc.take_rows(P["emb.time"], slot)
    if cfg.use_semantic:
        e_c = dc.take_rows(P["emb.cat"], cat)
    else:
        e_c = Tensor(np.zeros(np.shape(poi) + (cfg.d_cat,)))
    return dc.concat([e_p, e_c, e_t], axis=-1)


def mobility_features(P, poi, cat, slot, cfg: ModelConfig, rt: Runtime | None = None, bias=None) -> Tensor:
    rt = rt or Runtime()
    poi = np.asarray(poi)
    x = embed_steps(P, poi, cat, slot, cfg) + positional_encoding(poi.shape[-1], cfg.d_model)
    return encode(P, "mob", rt.drop(x, cfg.dropout), cfg, rt, bias)


def social_aggregate(P, h_self: Tensor, h_nb: Tensor | None, mask, cfg: ModelConfig):
    """Attention of the user's feature over ``[self, neighbours]``.

    Returns ``(H, alpha)`` where ``alpha`` is the head-averaged weight row
    of the self position, ``(B, 1 + K)``.  Rows without neighbours return
    ``h_self`` unchanged and ``alpha = [1, 0, ...]``.
    """
    B = h_self.shape[0]
    mask = np.zeros((B, 0), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    K = mask.shape[1]
    alpha = np.zeros((B, 1 + K))
    alpha[:, 0] = 1.0
    has = mask.any(axis=1)
    if K == 0 or not has.any():
        return h_self, alpha
    seq = dc.concat([dc.reshape(h_self, (B, 1, cfg.d_model)), h_nb], axis=1)
    keep = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    bias = np.where(keep, 0.0, MASK_BIAS)[:, None, None, :]
    q_in = dc.reshape(h_self, (B, 1, cfg.d_model))
    out, w = multi_head_attention(P, "social", q_in, seq, cfg.n_heads, bias)
    out = dc.reshape(out, (B, cfg.d_model))
    alpha[has] = w.data[has].mean(axis=1)[:, 0, :]
    sel = has[:, None].astype(np.float64)
    return out * sel + h_self * (1.0 - sel), alpha


def aux_geo_features(P, coords, cfg: ModelConfig, rt: Runtime | None = None) -> Tensor:
    rt = rt or Runtime()
    coords = np.asarray(coords, dtype=np.float64)
    e = dc.linear(Tensor(coords), P["loc.w"], P["loc.b"]) + positional_encoding(coords.shape[-2], cfg.d_model)
    return encode(P, "geo", rt.drop(e, cfg.dropout), cfg, rt)


def fuse(P, ctx: Tensor | None, g: Tensor | None, user, cfg: ModelConfig) -> Tensor:
    user = np.asarray(user)
    B = user.shape[0]
    zeros = Tensor(np.zeros((B, cfg.d_model)))
    e_u = dc.take_rows(P["emb.user"], user)
    x = dc.concat([ctx if ctx is not None else zeros, g if g is not None else zeros, e_u], axis=-1)
    return dc.relu(dc.linear(x, P["fuse.w"], P["fuse.b"]))


def _mlp(P, prefix, x):
    hidden = dc.relu(dc.linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return dc.linear(hidden, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def predict_poi(P, f: Tensor) -> Tensor:
    """Log-probabilities over all POIs, ``(B, |P|)``."""
    return dc.log_softmax(_mlp(P, "mlp_f", f), axis=-1)


def predict_location(P, f: Tensor) -> Tensor:
    return _mlp(P, "mlp_g", f)


def infer_coordinate(probs: np.ndarray, poi_xy: np.ndarray) -> np.ndarray:
    """Registry coordinate of the most probable POI (ties -> lowest id)."""
    return poi_xy[np.argmax(probs, axis=-1)]


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    user: np.ndarray
    poi: np.ndarray
    cat: np.ndarray
    slot: np.ndarray
    xy: np.ndarray
    cutoff: np.ndarray
    target_poi: np.ndarray
    target_xy: np.ndarray
    nb_poi: np.ndarray
    nb_cat: np.ndarray
    nb_slot: np.ndarray
    nb_last_time: np.ndarray
    nb_slot_index: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    @property
    def nb_mask(self) -> np.ndarray:
        return self.nb_slot_index >= 0


def make_batch(corpus: Corpus, targets: np.ndarray, n: int, nb_end: np.ndarray | None = None) -> Batch:
    """Gather model inputs for windows ending at ``targets``.

    ``nb_end`` (``(B, K)``, -1 for empty) gives the exclusive end row of each
    neighbour's history; valid neighbour windows are packed into
    ``nb_*`` arrays and addressed through ``nb_slot_index``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    log = corpus.log
    rows = targets[:, None] - n + np.arange(n)
    if nb_end is None:
        nb_end = np.zeros((len(targets), 0), dtype=np.int64)
    valid = nb_end >= 0
    slot_index = np.full(nb_end.shape, -1, dtype=np.int64)
    slot_index[valid] = np.arange(valid.sum())
    nb_rows = nb_end[valid][:, None] - n + np.arange(n)
    return Batch(
        user=log.user[targets],
        poi=log.poi[rows],
        cat=corpus.category[rows],
        slot=corpus.slot[rows],
        xy=corpus.xy[rows],
        cutoff=log.ts[targets - 1],
        target_poi=log.poi[targets],
        target_xy=corpus.xy[targets],
        nb_poi=log.poi[nb_rows],
        nb_cat=corpus.category[nb_rows],
        nb_slot=corpus.slot[nb_rows],
        nb_last_time=log.ts[nb_end[valid] - 1] if valid.any() else np.zeros(0, np.int64),
        nb_slot_index=slot_index,
    )


@dataclass
class ModelOutput:
    log_probs: Tensor
    pred_xy: Tensor
    h: Tensor | None
    H: Tensor | None
    g: Tensor | None
    f: Tensor
    alpha: np.ndarray
    attention: list = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


def forward(P, batch: Batch, cfg: ModelConfig, rt: Runtime | None = None) -> ModelOutput:
    """Full network on one batch: features, fusion and both heads."""
    rt = rt or Runtime()
    B = len(batch)
    h = H = g = None
    alpha = np.ones((B, 1))
    if cfg.use_mobility:
        social = cfg.use_social and batch.nb_slot_index.shape[1] and len(batch.nb_poi)
        if social:
            # the user's and the neighbours' sequences share one encoder pass
            both = mobility_features(
                P, np.concatenate([batch.poi, batch.nb_poi]), np.concatenate([batch.cat, batch.nb_cat]),
                np.concatenate([batch.slot, batch.nb_slot]), cfg, rt,
            )
            h, h_nb_valid = both[:B], both[B:]
        else:
            h = mobility_features(P, batch.poi, batch.cat, batch.slot, cfg, rt)
        H = h
        if social:
            table = dc.concat([h_nb_valid, Tensor(np.zeros((1, cfg.d_model)))], axis=0)
            idx = np.where(batch.nb_mask, batch.nb_slot_index, len(batch.nb_poi))
            h_nb = dc.take_rows(table, idx)
            H, alpha = social_aggregate(P, h, h_nb, batch.nb_mask, cfg)
    if cfg.use_aux:
        g = aux_geo_features(P, batch.xy[:, -cfg.aux_len:, :], cfg, rt)
    f = fuse(P, H, g, batch.user, cfg)
    return ModelOutput(predict_poi(P, f), predict_location(P, f), h, H, g, f, alpha, rt.capture or [])


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}
