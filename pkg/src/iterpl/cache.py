"""Fixed-capacity pool of pseudo-labeled batches with probability-p refresh.

One entry is one batch: the feature matrices together with the hard
pseudo-labels decoded for them and the model version that produced those
labels. Draws are uniform; on each draw, with probability p, the drawn
entry is evicted and a freshly supplied one takes its place, but the DRAWN
entry is what the caller trains on either way. That ordering is the point:
the labels being trained on lag the model that generated them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import (
    check_magic,
    read_array_f8,
    read_json,
    write_array_f8,
    write_json,
    write_magic,
)
from .ctc import InvalidConfigError, TokenSeq

SNAPSHOT_MAGIC = b"IPLQ"
SNAPSHOT_VERSION = 1


class CacheFullError(RuntimeError):
    """Insert attempted on a cache already at capacity."""


class CacheNotReadyError(RuntimeError):
    """Draw attempted before the fill phase completed."""


@dataclass
class PLCacheEntry:
    batch: list[np.ndarray]  # feature matrices
    pls: list[TokenSeq]  # parallel hard pseudo-labels
    model_version: int
    entry_id: int
    utt_ids: list[str]  # provenance, for oracle PL-quality scoring

    def __post_init__(self):
        if len(self.batch) != len(self.pls) or len(self.batch) != len(self.utt_ids):
            raise InvalidConfigError("batch, pls, and utt_ids must be parallel")
        if self.model_version < 0:
            raise InvalidConfigError("model_version must be >= 0")


@dataclass
class PLCache:
    capacity: int
    entries: list[PLCacheEntry] = field(default_factory=list)
    draws: int = 0
    replacements: int = 0
    next_entry_id: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise InvalidConfigError(f"capacity must be >= 1, got {self.capacity}")

    @property
    def full(self) -> bool:
        return len(self.entries) == self.capacity

    def make_entry(self, batch, pls, model_version, utt_ids) -> PLCacheEntry:
        """Build an entry with a lifetime-unique id (does not insert it)."""
        entry = PLCacheEntry(
            batch=list(batch),
            pls=list(pls),
            model_version=model_version,
            entry_id=self.next_entry_id,
            utt_ids=list(utt_ids),
        )
        self.next_entry_id += 1
        return entry

    def insert(self, entry: PLCacheEntry) -> None:
        if self.full:
            raise CacheFullError(f"cache already holds {self.capacity} entries")
        self.entries.append(entry)

    def draw_and_maybe_replace(
        self, p: float, fresh_supplier, rng: np.random.Generator
    ) -> PLCacheEntry:
        """Uniform draw; with probability p swap the drawn slot for a fresh entry.

        The drawn entry is returned even when it was just evicted.
        """
        if not 0.0 <= p <= 1.0:
            raise InvalidConfigError(f"replace probability must be in [0, 1], got {p}")
        if not self.full:
            raise CacheNotReadyError(
                f"cache holds {len(self.entries)}/{self.capacity} entries; fill first"
            )
        idx = int(rng.integers(0, self.capacity))
        drawn = self.entries[idx]
        self.draws += 1
        if rng.random() < p:
            self.entries[idx] = fresh_supplier()
            self.replacements += 1
        return drawn

    def age_stats(self, current_version: int) -> dict[str, float]:
        if not self.entries:
            raise CacheNotReadyError("cache is empty")
        ages = np.array([current_version - e.model_version for e in self.entries], dtype=float)
        return {"mean": float(ages.mean()), "max": float(ages.max())}

    def write_to(self, f) -> None:
        write_json(
            f,
            {
                "capacity": self.capacity,
                "draws": self.draws,
                "replacements": self.replacements,
                "next_entry_id": self.next_entry_id,
                "num_entries": len(self.entries),
            },
        )
        for e in self.entries:
            write_json(
                f,
                {
                    "entry_id": e.entry_id,
                    "model_version": e.model_version,
                    "utt_ids": e.utt_ids,
                    "pls": [list(pl) for pl in e.pls],
                    "num_mats": len(e.batch),
                },
            )
            for mat in e.batch:
                write_array_f8(f, mat)

    @classmethod
    def read_from(cls, f) -> "PLCache":
        head = read_json(f)
        cache = cls(
            capacity=head["capacity"],
            draws=head["draws"],
            replacements=head["replacements"],
            next_entry_id=head["next_entry_id"],
        )
        for _ in range(head["num_entries"]):
            meta = read_json(f)
            mats = [read_array_f8(f) for _ in range(meta["num_mats"])]
            cache.entries.append(
                PLCacheEntry(
                    batch=mats,
                    pls=[TokenSeq(pl) for pl in meta["pls"]],
                    model_version=meta["model_version"],
                    entry_id=meta["entry_id"],
                    utt_ids=meta["utt_ids"],
                )
            )
        return cache

    def save(self, path) -> None:
        with open(path, "wb") as f:
            write_magic(f, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)
            self.write_to(f)

    @classmethod
    def load(cls, path) -> "PLCache":
        with open(path, "rb") as f:
            check_magic(f, SNAPSHOT_MAGIC, SNAPSHOT_VERSION, "cache snapshot")
            return cls.read_from(f)
