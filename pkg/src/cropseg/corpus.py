"""Corpus bookkeeping: manifest, screening journal, and coverage statistics.

The manifest is a plain JSON snapshot of the sample list. All mutation of
screening state flows through an append-only JSONL journal; replaying the
journal over a manifest (last decision per sample wins) reconstructs the
current state after any crash.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .pseudolabel import BinaryMask
from .raster import Raster2D, RasterIOError, load_gray, save_gray

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STATUSES = ("pending", "accepted", "rejected", "full_coverage")
SPLITS = ("train", "test")
VERDICTS = ("accept", "reject", "full_coverage")
COVERAGE_BINS = 20

_VERDICT_STATUS = {"accept": "accepted", "reject": "rejected", "full_coverage": "full_coverage"}


def now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class SampleRecord:
    id: str
    image_path: str
    depth_path: str
    mask_path: str | None = None
    source: str = ""
    split: str = "train"
    status: str = "pending"
    coverage: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("sample id must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.coverage is not None and not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must be in [0,1], got {self.coverage}")

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "image_path": self.image_path,
            "depth_path": self.depth_path,
            "source": self.source,
            "split": self.split,
            "status": self.status,
        }
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        if self.coverage is not None:
            d["coverage"] = self.coverage
        return d


@dataclass
class Manifest:
    samples: list[SampleRecord] = field(default_factory=list)
    created: str = field(default_factory=now_rfc3339)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def by_id(self, sample_id: str) -> SampleRecord | None:
        for s in self.samples:
            if s.id == sample_id:
                return s
        return None


@dataclass(frozen=True)
class ScreeningDecision:
    sample_id: str
    verdict: str
    at: str = field(default_factory=now_rfc3339)
    operator: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "verdict": self.verdict,
            "at": self.at,
            "operator": self.operator,
        }


@dataclass(frozen=True)
class CoverageHistogram:
    """Counts over 20 equal-width coverage bins on [0, 1]."""

    counts: tuple
    total: int

    def to_dict(self) -> dict:
        return {"bins": COVERAGE_BINS, "counts": list(self.counts), "total": self.total}


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unknown manifest version {doc.get('version')!r}")
    samples = [
        SampleRecord(
            id=s["id"],
            image_path=s["image_path"],
            depth_path=s["depth_path"],
            mask_path=s.get("mask_path"),
            source=s.get("source", ""),
            split=s.get("split", "train"),
            status=s.get("status", "pending"),
            coverage=s.get("coverage"),
        )
        for s in doc["samples"]
    ]
    return Manifest(samples=samples, created=doc.get("created", now_rfc3339()))


def save_manifest(m: Manifest, path) -> None:
    """Atomic write: serialize to a sibling temporary, then rename."""
    doc = {
        "version": m.version,
        "created": m.created,
        "samples": [s.to_dict() for s in m.samples],
    }
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def mask_coverage(mask_path) -> float:
    """Foreground fraction of a stored mask (any nonzero pixel counts)."""
    r = load_gray(mask_path)
    return float((r.data != 0).mean())


def coverage_stats(m: Manifest) -> CoverageHistogram:
    """Histogram mask coverages over 20 bins, caching each value on its record.

    Samples without a readable mask are skipped and reported via logging.
    """
    counts = [0] * COVERAGE_BINS
    total = 0
    for s in m.samples:
        if not s.mask_path:
            continue
        try:
            cov = mask_coverage(s.mask_path)
        except (OSError, RasterIOError, ValueError) as exc:
            log.warning("skipping %s: unreadable mask %s (%s)", s.id, s.mask_path, exc)
            continue
        s.coverage = cov
        counts[min(int(cov * COVERAGE_BINS), COVERAGE_BINS - 1)] += 1
        total += 1
    return CoverageHistogram(counts=tuple(counts), total=total)


def _image_dimensions(path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as im:
        return im.height, im.width


def assign_full_coverage(s: SampleRecord) -> BinaryMask:
    """Write the all-ones mask for a fully covered image and update the record.

    Idempotent: re-invocation rewrites the same mask. The record is only
    touched after the mask is safely on disk.
    """
    h, w = _image_dimensions(s.image_path)
    mask = BinaryMask(Raster2D(np.ones((h, w), dtype=np.uint8)))
    mask_path = s.mask_path or str(Path(s.image_path).with_suffix("")) + "_mask.png"
    save_gray(mask.raster, mask_path, format="png")
    s.mask_path = mask_path
    s.status = "full_coverage"
    s.coverage = 1.0
    return mask


def record_decision(journal_path, d: ScreeningDecision) -> None:
    """Append one JSONL line and force it to disk before returning."""
    line = json.dumps(d.to_dict(), separators=(",", ":"))
    with open(journal_path, "a", encoding="utf-8") as f:
        f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())


def replay_journal(journal_path, m: Manifest) -> Manifest:
    """Fold the journal over the manifest; the last decision per sample wins.

    Malformed lines (e.g. a crash-truncated tail) and decisions for unknown
    ids are reported and skipped; everything parseable is still applied.
    """
    if not os.path.exists(journal_path):
        return m
    with open(journal_path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                doc = json.loads(raw)
                d = ScreeningDecision(
                    sample_id=doc["sample_id"],
                    verdict=doc["verdict"],
                    at=doc.get("at", ""),
                    operator=doc.get("operator", ""),
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                log.warning("%s line %d: skipping malformed decision (%s)", journal_path, lineno, exc)
                continue
            s = m.by_id(d.sample_id)
            if s is None:
                log.warning("%s line %d: unknown sample id %r", journal_path, lineno, d.sample_id)
                continue
            s.status = _VERDICT_STATUS[d.verdict]
            if d.verdict == "full_coverage":
                s.coverage = 1.0
    return m
