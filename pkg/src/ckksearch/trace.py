"""Append-only trial ledger stored as checksummed JSON lines.

Every line is ``{"record": {...}, "checksum": "<sha256 of the record>"}``.
The same line format is used for recorded-backend fixtures.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import CorruptTrace

ENCRYPTED_MODES = ("FHE_LIGHT", "FHE_FULL")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checksum(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def checked_line(record: dict[str, Any]) -> str:
    return canonical_json({"record": record, "checksum": checksum(record)}) + "\n"


def read_checked_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Load and verify every line; any damage raises CorruptTrace."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptTrace(f"{path}: unreadable ({exc})") from None
    if text and not text.endswith("\n"):
        raise CorruptTrace(f"{path}: last line is truncated")
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            raise CorruptTrace(f"{path}:{n}: not valid JSON") from None
        if not isinstance(doc, dict) or doc.keys() != {"record", "checksum"}:
            raise CorruptTrace(f"{path}:{n}: missing record or checksum")
        if checksum(doc["record"]) != doc["checksum"]:
            raise CorruptTrace(f"{path}:{n}: checksum mismatch")
        out.append(doc["record"])
    return out


def write_checked_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(checked_line(rec))


@dataclass
class TrialRecord:
    ordinal: int
    phase: str
    mode: str
    digest: str
    config: dict[str, Any]
    metrics: dict[str, Any]
    verdict: dict[str, Any]
    signature: str = ""
    role: str = ""
    iteration: int | None = None
    decision: str | None = None
    proposer: str | None = None
    directions: list[str] = field(default_factory=list)
    rationale: str = ""
    coefficients: dict[str, float] | None = None
    timestamp: float = 0.0

    @property
    def encrypted(self) -> bool:
        return self.mode in ENCRYPTED_MODES

    @property
    def gates_passed(self) -> bool:
        return bool(self.verdict.get("passed"))

    @property
    def measured_latency_s(self) -> float | None:
        return self.metrics.get("measured_latency_s")

    def to_dict(self, with_timestamp: bool = True) -> dict[str, Any]:
        doc = asdict(self)
        if not with_timestamp:
            doc.pop("timestamp")
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> TrialRecord:
        try:
            return cls(**doc)
        except TypeError as exc:
            raise CorruptTrace(f"malformed trial record: {exc}") from None


class TraceRepository:
    """Ordinal-monotone ledger, optionally backed by a file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[TrialRecord] = []
        if self.path is not None and self.path.exists():
            self._records = [TrialRecord.from_dict(d) for d in read_checked_jsonl(self.path)]
            ordinals = [r.ordinal for r in self._records]
            if any(b <= a for a, b in zip(ordinals, ordinals[1:])):
                raise CorruptTrace(f"{self.path}: ordinals are not strictly increasing")

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self._records)

    @property
    def next_ordinal(self) -> int:
        return self._records[-1].ordinal + 1 if self._records else 0

    def append(self, record: TrialRecord) -> TrialRecord:
        if record.ordinal != self.next_ordinal:
            raise ValueError(f"ordinal {record.ordinal} out of sequence (expected {self.next_ordinal})")
        if self.path is not None:
            line = checked_line(record.to_dict())
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line.encode("utf-8"))
                os.fsync(fd)
            finally:
                os.close(fd)
        self._records.append(record)
        return record

    def query_digest(self, digest: str) -> list[TrialRecord]:
        return [r for r in self._records if r.digest == digest]

    def query_signature(self, signature: str) -> list[TrialRecord]:
        return [r for r in self._records if r.signature == signature]

    def exemplars(self, signature: str, limit: int = 1) -> list[dict[str, Any]]:
        """Best gate-passing encrypted configs seen for this architecture."""
        hits = [
            r
            for r in self.query_signature(signature)
            if r.encrypted and r.gates_passed and r.decision != "reject" and r.measured_latency_s is not None
        ]
        hits.sort(key=lambda r: (r.measured_latency_s, r.ordinal))
        out: list[dict[str, Any]] = []
        seen: set[str] = set()
        for r in hits:
            if r.digest in seen:
                continue
            seen.add(r.digest)
            out.append(r.config)
            if len(out) >= limit:
                break
        return out
