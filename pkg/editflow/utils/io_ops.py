"""Checkpoints, newline-delimited record streams and CSV tables.

Every stream starts with a HeaderRecord carrying the config hash, seed and version.
"""
import csv
import json
import os
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from editflow.rate_model import ModelParams, build_model
from editflow.schemas.record_schemas import FORMAT_VERSION, CheckpointHeader, HeaderRecord, HeatmapRow
from editflow.structures import ConfigError, ModelError

VERSION = "0.1.0"
CHECKPOINT_MAGIC = f"EDITFLOW-CKPT {FORMAT_VERSION}"
HEATMAP_COLUMNS = list(HeatmapRow.model_fields)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# --- Checkpoints ---

def save_checkpoint(params: ModelParams, path: str) -> str:
    """Magic line, JSON header line, then little-endian float64 values."""
    _ensure_parent(path)
    header = CheckpointHeader(spec=params.spec, num_values=int(params.values.size))
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        f.write((header.model_dump_json() + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(params.values, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str) -> ModelParams:
    if not os.path.exists(path):
        raise ConfigError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"{path} is not an editflow checkpoint (got {magic!r})")
        try:
            header = CheckpointHeader.model_validate_json(f.readline())
        except ValidationError as e:
            raise ModelError(f"Corrupt checkpoint header in {path}: {e}") from e
        payload = f.read()
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header.num_values:
        raise ModelError(f"{path}: header says {header.num_values} values, found {values.size}")
    expected = build_model(header.spec).num_values
    if values.size != expected:
        raise ModelError(f"{path}: {values.size} values do not fit a {header.spec.kind} model ({expected})")
    return ModelParams(header.spec, values)


# --- Record streams ---

def make_header(kind: str, config_hash: str, seed: int) -> HeaderRecord:
    return HeaderRecord(kind=kind, version=VERSION, config_hash=config_hash, seed=seed)


class RecordWriter:
    """Single-writer newline-delimited JSON stream; the header goes out on open."""

    def __init__(self, path: str, header: HeaderRecord):
        _ensure_parent(path)
        self.path = path
        self._f = open(path, "w", encoding="utf-8")
        self.write(header)

    def write(self, record: BaseModel) -> None:
        self._f.write(record.model_dump_json() + "\n")

    def write_all(self, records: Iterable[BaseModel]) -> None:
        for record in records:
            self.write(record)

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str) -> Tuple[HeaderRecord, List[dict]]:
    """Header plus the remaining records as plain dicts."""
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ConfigError(f"{path} is empty")
    header = HeaderRecord.model_validate_json(lines[0])
    return header, [json.loads(line) for line in lines[1:]]


# --- CSV ---

def write_heatmap_csv(path: str, rows: Iterable[HeatmapRow], header: HeaderRecord) -> str:
    """`# {header json}` comment line, then x0,x1,count,prob."""
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("# " + header.model_dump_json() + "\n")
        writer = csv.DictWriter(f, fieldnames=HEATMAP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            data = row.model_dump()
            data["prob"] = repr(float(data["prob"]))
            writer.writerow(data)
    return path


def read_heatmap_csv(path: str) -> Tuple[Optional[HeaderRecord], List[HeatmapRow]]:
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline()
        header = None
        if first.startswith("# "):
            header = HeaderRecord.model_validate_json(first[2:])
        else:
            f.seek(0)
        reader: Iterator[dict] = csv.DictReader(f)
        rows = [HeatmapRow.model_validate(r) for r in reader]
    return header, rows
