"""Embedding CSV files, JSON inputs, and atomic output writes."""

from __future__ import annotations

import csv
import gzip
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import Task
from .latent_model import LatentModel
from .recovery import Severity
from .shift import ShiftProfile

SPLITS = ("pretrain", "downstream")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    labels: tuple
    vectors: np.ndarray
    split: str = "pretrain"
    severity: str | None = None

    def __post_init__(self):
        labels = tuple(str(l) for l in self.labels)
        vectors = np.array(self.vectors, dtype=float)
        if vectors.ndim != 2:
            raise DataError("vectors must form a 2-D array")
        if vectors.shape[0] != len(labels):
            raise DataError(f"{len(labels)} labels for {vectors.shape[0]} vectors")
        if any(not l for l in labels):
            raise DataError("labels must be nonempty")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}")
        vectors.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def classes(self) -> list:
        return sorted(set(self.labels))

    def rows_for(self, label) -> np.ndarray:
        mask = np.fromiter((l == str(label) for l in self.labels), dtype=bool, count=len(self.labels))
        return self.vectors[mask]

    def __len__(self) -> int:
        return len(self.labels)


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def read_embeddings(path, split: str = "pretrain", severity: str | None = None) -> EmbeddingSet:
    """Parse ``label,x0,...,x{d-1}`` CSV (optionally gzip-compressed)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    labels, rows = [], []
    try:
        with _open_text(path, "r") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            d = len(header) - 1
            if d < 1 or header[0] != "label" or header[1:] != [f"x{i}" for i in range(d)]:
                raise DataError(f"{path}, line 1: header must be label,x0,...,x{{d-1}}")
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != d + 1:
                    raise DataError(f"{path}, line {line}: expected {d + 1} fields, found {len(row)}")
                if not row[0]:
                    raise DataError(f"{path}, line {line}: empty label")
                try:
                    values = [float(v) for v in row[1:]]
                except ValueError:
                    raise DataError(f"{path}, line {line}: non-numeric value") from None
                if not all(math.isfinite(v) for v in values):
                    raise DataError(f"{path}, line {line}: non-finite value")
                labels.append(row[0])
                rows.append(values)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"{path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return EmbeddingSet(tuple(labels), np.array(rows), split, severity)


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def embeddings_csv(es: EmbeddingSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"x{i}" for i in range(es.dim)])
    for label, row in zip(es.labels, es.vectors):
        w.writerow([label] + [format(float(v), ".17g") for v in row])
    return buf.getvalue()


def write_embeddings(path, es: EmbeddingSet):
    """Write atomically; a ``.gz`` suffix compresses with a fixed timestamp."""
    path = Path(path)
    data = embeddings_csv(es).encode("utf-8")
    if path.suffix == ".gz":
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(data)
        data = buf.getvalue()
    _atomic_write(path, data)


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    _atomic_write(path, dumps_json(obj).encode("utf-8"))


def write_text(path, text: str):
    _atomic_write(path, text.encode("utf-8"))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _wrap(path, build):
    data = read_json(path)
    try:
        return build(data)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: {exc}") from None


def load_model(path) -> LatentModel:
    return _wrap(path, LatentModel.from_dict)


def load_shift(path) -> ShiftProfile:
    return _wrap(path, ShiftProfile.from_dict)


def load_task(path) -> Task:
    return _wrap(path, lambda d: Task(tuple(d["classes"]), d.get("label_dist")))


def load_severities(path) -> list[Severity]:
    def build(data):
        if not isinstance(data, list) or not data:
            raise ValueError("severities must be a nonempty JSON list")
        out = [Severity(str(e["tag"]), e.get("translation"), e.get("scale")) for e in data]
        tags = [s.tag for s in out]
        if len(set(tags)) != len(tags):
            raise ValueError("severity tags must be unique")
        return out

    return _wrap(path, build)
