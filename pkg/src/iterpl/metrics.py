"""Edit-distance metrics, pseudo-label quality oracle, and metrics logging.

Token error rate plays the role WER would play on real transcripts: the
synthetic task's tokens are its words. Rates are pooled (sum of edit
distances over sum of reference lengths), not averaged per utterance.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ctc import InvalidInputError, TokenSeq

METRICS_FILENAME = "metrics.jsonl"
CURVE_FILENAME = "learning_curve.csv"

# wall_ms is the only field allowed to differ between two runs of the same
# seeded configuration; everything else is part of the determinism contract.
NONDETERMINISTIC_FIELDS = ("wall_ms",)


def edit_distance(a: TokenSeq, b: TokenSeq) -> int:
    """Minimal insert/delete/substitute count between two token sequences."""
    xa, xb = a.tokens, b.tokens
    if len(xa) < len(xb):
        xa, xb = xb, xa
    if not xb:
        return len(xa)
    prev = np.arange(len(xb) + 1)
    cur = np.empty_like(prev)
    for i, ta in enumerate(xa, start=1):
        cur[0] = i
        for j, tb in enumerate(xb, start=1):
            cost = 0 if ta == tb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return int(prev[len(xb)])


def error_rate(hyps: list[TokenSeq], refs: list[TokenSeq]) -> float:
    """Pooled token error rate: sum of edit distances / sum of ref lengths."""
    if len(hyps) != len(refs):
        raise InvalidInputError(
            f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}"
        )
    total_len = sum(len(r) for r in refs)
    if total_len == 0:
        raise InvalidInputError("zero total reference length")
    total_dist = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return total_dist / total_len


def pl_oracle_ter(entries, oracle) -> float:
    """Error rate of current pseudo-labels against hidden references.

    `entries` yields (utt_id, TokenSeq) pairs; `oracle` maps an utterance id
    to its hidden reference (a mapping or a callable).
    """
    lookup = oracle.__getitem__ if hasattr(oracle, "__getitem__") else oracle
    hyps: list[TokenSeq] = []
    refs: list[TokenSeq] = []
    for utt_id, pl in entries:
        try:
            ref = lookup(utt_id)
        except KeyError as exc:
            raise InvalidInputError(f"no hidden reference for {utt_id!r}") from exc
        if ref is None:
            raise InvalidInputError(f"no hidden reference for {utt_id!r}")
        hyps.append(pl)
        refs.append(ref)
    return error_rate(hyps, refs)


@dataclass
class MetricsRecord:
    update_index: int
    phase: str  # pretrain | fill | main
    dev_ter: float
    train_loss_labeled: float
    train_loss_unlabeled: float
    pl_oracle_ter: float
    empty_pl_fraction: float
    lr: float
    cache_mean_staleness: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


@dataclass
class MetricsSink:
    """Single-writer metrics stream for one run directory.

    Appends one self-describing record per evaluation point to a JSONL file
    and keeps a companion (update_index, dev_ter) CSV for curve plotting.
    """

    run_dir: Path
    records: list[MetricsRecord] = field(default_factory=list)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def emit(self, record: MetricsRecord) -> None:
        if self.records and record.update_index <= self.records[-1].update_index:
            raise InvalidInputError(
                "update_index must be strictly increasing: "
                f"{record.update_index} after {self.records[-1].update_index}"
            )
        self.records.append(record)
        with open(self.run_dir / METRICS_FILENAME, "a") as f:
            f.write(record.to_json() + "\n")
        self._rewrite_curve()

    def _rewrite_curve(self) -> None:
        with open(self.run_dir / CURVE_FILENAME, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["update_index", "dev_ter"])
            for r in self.records:
                w.writerow([r.update_index, repr(r.dev_ter)])

    @classmethod
    def resume(cls, run_dir) -> "MetricsSink":
        """Reopen an existing stream for appending; prior records are kept."""
        sink = cls(run_dir)
        path = sink.run_dir / METRICS_FILENAME
        if path.exists():
            sink.records = cls.read(run_dir)
        return sink

    @staticmethod
    def read(run_dir) -> list[MetricsRecord]:
        path = Path(run_dir) / METRICS_FILENAME
        with open(path) as f:
            return [MetricsRecord.from_json(line) for line in f if line.strip()]


def stream_fingerprint(records: list[MetricsRecord]) -> str:
    """Digest of a metrics stream with timing fields excluded.

    Two runs of the same seeded configuration must produce equal
    fingerprints; wall-clock time is the only tolerated difference.
    """
    h = hashlib.sha256()
    for r in records:
        d = asdict(r)
        for k in NONDETERMINISTIC_FIELDS:
            d.pop(k, None)
        h.update(json.dumps(d, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()
