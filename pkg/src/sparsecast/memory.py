"""Per-site store of Top-u query positions recorded during training."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attention import top_u_select

__all__ = ["IndexRecord", "AttentionIndexMemory", "MemoryFrozenError", "MEMORY_FORMAT_VERSION"]

MEMORY_FORMAT_VERSION = 1
AGGREGATION_MODES = ("frequency", "eq3_mean")

Key = tuple[int, int]


class MemoryFrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class IndexRecord:
    epoch: int
    iteration: int
    indices: tuple[int, ...]


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def _repair(values: Iterable[int], bound: int) -> list[int]:
    """Make ``values`` distinct by moving collisions to the nearest free slot.

    Lower positions win ties in distance.
    """
    used: set[int] = set()
    for v in values:
        v = min(max(int(v), 0), bound - 1)
        if v in used:
            for step in range(1, bound):
                lo, hi = v - step, v + step
                if lo >= 0 and lo not in used:
                    v = lo
                    break
                if hi < bound and hi not in used:
                    v = hi
                    break
        used.add(v)
    return sorted(used)


class AttentionIndexMemory:
    """Top-u index history keyed by ``(layer_id, head_id)``.

    ``aggregation_mode`` picks how a history collapses to one index set:
    ``"frequency"`` keeps the u most often selected positions,
    ``"eq3_mean"`` averages the sorted index vectors element-wise.
    Records from epochs below ``warmup_epochs`` are ignored when
    aggregating, unless nothing else was recorded for that site.
    """

    def __init__(self, aggregation_mode: str = "frequency", warmup_epochs: int = 1):
        if aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"aggregation_mode must be one of {AGGREGATION_MODES}, got {aggregation_mode!r}")
        if warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        self.aggregation_mode = aggregation_mode
        self.warmup_epochs = warmup_epochs
        self.entries: dict[Key, list[IndexRecord]] = defaultdict(list)
        self.lengths: dict[Key, int] = {}
        self.frozen = False
        self._aggregated: dict[Key, list[int]] = {}

    def keys(self) -> list[Key]:
        return sorted(set(self.entries) | set(self._aggregated))

    def __contains__(self, key: Key) -> bool:
        return key in self._aggregated if self.frozen else key in self.entries

    def record(
        self,
        layer_id: int,
        head_id: int,
        epoch: int,
        iteration: int,
        indices: Sequence[int],
        length: int | None = None,
    ) -> None:
        """Append one observed index set; ``length`` is the query count L_Q."""
        if self.frozen:
            raise MemoryFrozenError("memory is frozen; record() is no longer accepted")
        key = (int(layer_id), int(head_id))
        idx = tuple(int(i) for i in indices)
        if not idx:
            raise ValueError("indices must be non-empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly ascending: {list(idx)}")
        if idx[0] < 0:
            raise ValueError(f"negative index in {list(idx)}")
        if length is not None:
            if key in self.lengths and self.lengths[key] != length:
                raise ValueError(f"site {key} recorded with L_Q={self.lengths[key]}, got {length}")
            if idx[-1] >= length:
                raise ValueError(f"index {idx[-1]} out of range for L_Q={length}")
            self.lengths[key] = int(length)
        history = self.entries[key]
        if history and len(history[0].indices) != len(idx):
            raise ValueError(f"site {key} holds u={len(history[0].indices)}, got {len(idx)} indices")
        history.append(IndexRecord(int(epoch), int(iteration), idx))

    def _bound(self, key: Key, records: list[IndexRecord]) -> int:
        if key in self.lengths:
            return self.lengths[key]
        u = len(records[0].indices)
        return max(r.indices[-1] for r in records) + 1 + u

    def aggregate(self, layer_id: int, head_id: int) -> list[int]:
        key = (int(layer_id), int(head_id))
        if key in self._aggregated:
            return list(self._aggregated[key])
        history = self.entries.get(key)
        if not history:
            raise KeyError(f"no records for attention site (layer={key[0]}, head={key[1]})")
        usable = [r for r in history if r.epoch >= self.warmup_epochs] or history
        u = len(usable[0].indices)
        bound = self._bound(key, usable)
        if self.aggregation_mode == "eq3_mean":
            mat = np.array([r.indices for r in usable], dtype=np.float64)
            return _repair(_round_half_up(mat.mean(axis=0)), bound)
        counts = np.bincount(
            np.concatenate([np.asarray(r.indices) for r in usable]), minlength=bound
        )
        return top_u_select(counts, u)

    def freeze(self) -> None:
        """Fix the aggregated index set of every site; further records are rejected."""
        if self.frozen:
            return
        for key in self.keys():
            self._aggregated[key] = self.aggregate(*key)
        self.frozen = True

    def stability_report(self) -> list[dict]:
        """Jaccard overlap of per-epoch index unions for consecutive epochs."""
        rows = []
        for key in sorted(self.entries):
            by_epoch: dict[int, set[int]] = defaultdict(set)
            for r in self.entries[key]:
                by_epoch[r.epoch].update(r.indices)
            epochs = sorted(by_epoch)
            for a, b in zip(epochs, epochs[1:]):
                sa, sb = by_epoch[a], by_epoch[b]
                union = sa | sb
                rows.append({
                    "layer_id": key[0],
                    "head_id": key[1],
                    "epoch_a": a,
                    "epoch_b": b,
                    "jaccard": len(sa & sb) / len(union) if union else 1.0,
                })
        return rows

    def to_dict(self) -> dict:
        """Checkpoint segment: the aggregated index set of every site."""
        sites = []
        for key in self.keys():
            idx = self.aggregate(*key)
            sites.append({
                "layer_id": key[0],
                "head_id": key[1],
                "u": len(idx),
                "length": self.lengths.get(key),
                "indices": idx,
            })
        return {
            "format": "sparsecast.index-memory",
            "version": MEMORY_FORMAT_VERSION,
            "aggregation_mode": self.aggregation_mode,
            "warmup_epochs": self.warmup_epochs,
            "sites": sites,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AttentionIndexMemory":
        """Rebuild a frozen memory from :meth:`to_dict` output."""
        if payload.get("version") != MEMORY_FORMAT_VERSION:
            raise ValueError(f"unsupported index-memory version {payload.get('version')!r}")
        mem = cls(payload["aggregation_mode"], payload.get("warmup_epochs", 1))
        for site in payload["sites"]:
            key = (int(site["layer_id"]), int(site["head_id"]))
            idx = [int(i) for i in site["indices"]]
            if len(idx) != site["u"]:
                raise ValueError(f"site {key}: u={site['u']} but {len(idx)} indices stored")
            mem._aggregated[key] = idx
            if site.get("length") is not None:
                mem.lengths[key] = int(site["length"])
        mem.frozen = True
        return mem
