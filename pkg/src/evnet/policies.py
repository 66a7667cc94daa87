"""Transmission policies: decide which gate neurons send their accumulated change."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, NamedTuple

import numpy as np

from .errors import ConfigError
from .tensor import DTYPE, INDEX_DTYPE

KINDS = ("exact_h0", "threshold", "chunked_spatial", "chunked_channel")


@dataclass(frozen=True)
class PolicyConfig:
    """Policy family member.

    ``h`` is the base threshold. Chunked kinds compare the chunk mean of |d|
    against ``h_chunk``; when that is not given it defaults to ``h / sqrt(k)``
    for k-by-k spatial chunks (``k`` is the geometric mean side for
    rectangular chunks) and to ``h`` for channel chunks. ``channel_scale``
    maps a gate key to per-channel gammas, giving ``h_i = h / gamma_c``.
    """

    kind: str = "threshold"
    h: float = 0.0
    chunk: tuple[int, int] | None = None
    h_chunk: float | None = None
    channel_scale: Mapping[str, np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if not (self.h >= 0) or not math.isfinite(self.h):
            raise ConfigError(f"threshold must be finite and >= 0, got {self.h}")
        if self.kind == "exact_h0" and self.h != 0:
            raise ConfigError("exact_h0 requires h == 0")
        if self.kind == "chunked_spatial":
            if self.chunk is None or len(self.chunk) != 2 or min(self.chunk) < 1:
                raise ConfigError("chunked_spatial needs a positive (rows, cols) chunk")
            object.__setattr__(self, "chunk", (int(self.chunk[0]), int(self.chunk[1])))
        if self.h_chunk is not None and not self.h_chunk >= 0:
            raise ConfigError("chunk threshold must be >= 0")
        if self.channel_scale is not None:
            if self.kind not in ("exact_h0", "threshold"):
                # whether gamma scaling composes with chunk means is not defined
                raise ConfigError("channel scaling cannot be combined with chunked policies")
            scales = {k: np.asarray(v, dtype=np.float64) for k, v in self.channel_scale.items()}
            for key, gamma in scales.items():
                if gamma.ndim != 1 or np.any(gamma <= 0) or not np.all(np.isfinite(gamma)):
                    raise ConfigError(f"gammas for {key!r} must be positive and finite")
            object.__setattr__(self, "channel_scale", scales)

    @property
    def chunked(self) -> bool:
        return self.kind.startswith("chunked")

    @property
    def chunk_threshold(self) -> float:
        if self.h_chunk is not None:
            return self.h_chunk
        if self.kind == "chunked_spatial":
            return self.h / math.sqrt(math.sqrt(self.chunk[0] * self.chunk[1]))
        return self.h

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base_dir: str | Path = ".") -> "PolicyConfig":
        kind = doc.get("policy", "threshold")
        h = float(doc.get("h", 0.0))
        chunk = doc.get("chunk")
        gamma = None
        if doc.get("gamma_file"):
            gamma = load_gammas(Path(base_dir) / doc["gamma_file"])
        return cls(kind=kind, h=h, chunk=tuple(chunk) if chunk else None,
                   h_chunk=doc.get("h_chunk"), channel_scale=gamma)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"policy": self.kind, "h": self.h}
        if self.chunk is not None:
            out["chunk"] = list(self.chunk)
        if self.chunked:
            out["h_chunk"] = self.chunk_threshold
        return out


def load_gammas(path: str | Path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        doc = json.load(fh)
    return {key: np.asarray(vals, dtype=np.float64) for key, vals in doc.items()}


class Mask(NamedTuple):
    """Fired flat indices (sorted) and how many stored |d| values were read."""

    fire: np.ndarray
    evaluated: int


def _as_chw(shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) == 3:
        return shape
    if len(shape) == 2:
        return (1,) + shape
    if len(shape) == 1:
        return (shape[0], 1, 1)
    raise ConfigError(f"policies support rank 1-3 tensors, got {shape}")


def _touched_or_all(d: np.ndarray, touched) -> np.ndarray:
    if touched is None:
        return np.arange(d.size, dtype=INDEX_DTYPE)
    return np.asarray(touched, dtype=INDEX_DTYPE).reshape(-1)


def thresholds(cfg: PolicyConfig, shape: tuple[int, ...], indices: np.ndarray,
               key: str | None = None) -> np.ndarray | float:
    """Per-index threshold h_i: h, or h / gamma_c when channel scaling applies."""
    if cfg.channel_scale is None or key not in cfg.channel_scale:
        return cfg.h
    gamma = cfg.channel_scale[key]
    c, h, w = _as_chw(tuple(shape))
    if gamma.shape[0] != c:
        raise ConfigError(f"{key!r}: {gamma.shape[0]} gammas for {c} channels")
    return (cfg.h / gamma)[indices // (h * w)]


def policy_threshold(d: np.ndarray, cfg: PolicyConfig, touched=None,
                     key: str | None = None) -> Mask:
    """Isolated singular policy: fire where |d_i| > h_i, looking only at touched indices."""
    if cfg.kind not in ("exact_h0", "threshold"):
        raise ConfigError(f"policy_threshold cannot evaluate {cfg.kind!r}")
    idx = _touched_or_all(d, touched)
    flat = d.reshape(-1)
    h_i = thresholds(cfg, d.shape, idx, key)
    fire = idx[np.abs(flat[idx]) > h_i]
    return Mask(np.sort(fire), int(idx.size))


@lru_cache(maxsize=64)
def _chunk_ids(shape: tuple[int, ...], kind: str, chunk: tuple[int, int] | None) -> np.ndarray:
    c, h, w = _as_chw(shape)
    if kind == "chunked_channel":
        ids = np.repeat(np.arange(c, dtype=INDEX_DTYPE), h * w)
    else:
        ch, cw = chunk
        if ch > h or cw > w:
            raise ConfigError(f"chunk {chunk} larger than spatial extent {(h, w)}")
        ny, nx = -(-h // ch), -(-w // cw)
        yy = (np.arange(h) // ch)[:, None]
        xx = (np.arange(w) // cw)[None, :]
        ids = (np.arange(c)[:, None, None] * (ny * nx) + yy[None] * nx + xx[None]).reshape(-1)
    ids.flags.writeable = False
    return ids


def chunk_ids(shape: tuple[int, ...], cfg: PolicyConfig) -> np.ndarray:
    """Chunk number of every flat index; edge chunks may be partial."""
    return _chunk_ids(tuple(shape), cfg.kind, cfg.chunk)


def policy_chunked(d: np.ndarray, touched, cfg: PolicyConfig) -> Mask:
    """Chunked policy: a touched chunk fires as a whole when mean |d| over it exceeds the threshold."""
    if not cfg.chunked:
        raise ConfigError(f"policy_chunked cannot evaluate {cfg.kind!r}")
    ids = chunk_ids(d.shape, cfg)
    idx = _touched_or_all(d, touched)
    if not idx.size:
        return Mask(np.empty(0, INDEX_DTYPE), 0)
    live = np.unique(ids[idx])
    members = np.flatnonzero(np.isin(ids, live, assume_unique=False))
    mag = np.abs(d.reshape(-1)[members]).astype(np.float64)
    member_chunk = np.searchsorted(live, ids[members])
    sums = np.bincount(member_chunk, weights=mag, minlength=live.size)
    counts = np.bincount(member_chunk, minlength=live.size)
    firing = sums / counts > cfg.chunk_threshold
    fire = members[firing[member_chunk]]
    return Mask(fire.astype(INDEX_DTYPE), int(members.size))


def evaluate(d: np.ndarray, touched, cfg: PolicyConfig, key: str | None = None) -> Mask:
    if cfg.chunked:
        return policy_chunked(d, touched, cfg)
    return policy_threshold(d, cfg, touched, key)


def gammas_from_affine(graph) -> dict[str, np.ndarray]:
    """Per-channel gammas for gates fed by an affine layer (through pointwise layers).

    Gammas are the folded scales; the key is the id of the layer whose output
    the gate converts, matching the engine's gate keys.
    """
    out = {}
    for layer in graph.layers:
        src = layer
        while src.kind == "relu":
            src = graph[src.inputs[0]]
        if src.kind == "affine" and src is not layer:
            gamma = src.weights.get("gamma", src.weights["scale"])
            out[layer.id] = np.abs(np.asarray(gamma, dtype=DTYPE))
    return out
