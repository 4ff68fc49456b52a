# persistence.py
"""
Named-tensor checkpoints, the metrics CSV log and report exports.

Checkpoint layout (all integers little-endian):
    8 bytes   magic b"NTENSOR1"
    8 bytes   u64 header length N
    N bytes   UTF-8 JSON header:
                {"tensors": [{"name", "dtype": "f32"|"f64", "shape", "offset", "nbytes"}, ...],
                 "metadata": {...}}
    padding   to the next 64-byte boundary (start of the data section)
    payloads  raw IEEE-754 little-endian values; each offset (relative to the
              data section) is a multiple of 64
"""

import csv
import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import (
    BadMagicError,
    TruncatedPayloadError,
    DuplicateTensorError,
    PayloadSizeError,
    TensorFormatError,
    MissingTensorError,
    MetricsFormatError,
    UnknownMetricError,
)
from models import (
    StorageDtype,
    MetricsRow,
    METRICS_COLUMNS,
    METRIC_VALUE_COLUMNS,
    DERIVED_METRICS,
    AGGREGATED_METRICS,
)
from mpstats import aggregate_layers, distribution_summary

logger = logging.getLogger(__name__)

MAGIC = b"NTENSOR1"
ALIGNMENT = 64
_HEADER_LEN = struct.Struct("<Q")


def _align(n):
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


@dataclass
class TensorEntry:
    dtype: StorageDtype
    shape: tuple
    values: np.ndarray


class TensorStore:
    """
    Ordered map name -> tensor. Values are held in their storage dtype, so
    what is analyzed in memory is exactly what a reader gets back from disk.
    """

    def __init__(self, metadata=None):
        self._entries = OrderedDict()
        self.metadata = dict(metadata or {})

    def add(self, name, values, dtype=StorageDtype.F64):
        if name in self._entries:
            raise DuplicateTensorError(f"Duplicate tensor name '{name}'")
        arr = np.ascontiguousarray(values, dtype=dtype.numpy_dtype)
        if arr.ndim == 0 or any(d < 1 for d in arr.shape):
            raise PayloadSizeError(f"Tensor '{name}' must have positive dimensions, got {arr.shape}")
        self._entries[name] = TensorEntry(dtype, tuple(arr.shape), arr)

    def get(self, name):
        """Tensor values promoted to float64"""
        if name not in self._entries:
            raise MissingTensorError(name)
        return self._entries[name].values.astype(np.float64)

    def entry(self, name):
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def layer_count(self):
        """Number of distinct layers.{i}. prefixes"""
        layers = set()
        for name in self._entries:
            parts = name.split(".")
            if len(parts) > 2 and parts[0] == "layers" and parts[1].isdigit():
                layers.add(int(parts[1]))
        return max(layers) + 1 if layers else 0


def write_tensors(store, path):
    """Write a TensorStore; the file appears atomically at `path`"""
    records = []
    offset = 0
    for name in store:
        entry = store.entry(name)
        nbytes = entry.values.nbytes
        records.append({
            "name": name,
            "dtype": entry.dtype.value,
            "shape": list(entry.shape),
            "offset": offset,
            "nbytes": nbytes,
        })
        offset = _align(offset + nbytes)

    header = json.dumps({"tensors": records, "metadata": store.metadata}, sort_keys=True).encode("utf-8")
    prefix = MAGIC + _HEADER_LEN.pack(len(header)) + header
    data_start = _align(len(prefix))

    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(prefix)
            f.write(b"\0" * (data_start - len(prefix)))
            position = 0
            for record, name in zip(records, store):
                f.write(b"\0" * (record["offset"] - position))
                f.write(store.entry(name).values.tobytes(order="C"))
                position = record["offset"] + record["nbytes"]
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"Wrote {len(records)} tensors to {path}")


def read_tensors(path):
    """
    Read a checkpoint written by write_tensors.

    Raises a TensorFormatError subclass on any corruption; no partial store
    is ever returned.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise TensorFormatError("checkpoint not found", path) from e
    except OSError as e:
        raise TensorFormatError(f"cannot read checkpoint: {e.strerror or e}", path) from e

    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic (not an NTENSOR1 file)", path)
    if len(blob) < len(MAGIC) + _HEADER_LEN.size:
        raise TruncatedPayloadError("file ends inside the header length", path)
    (header_len,) = _HEADER_LEN.unpack_from(blob, len(MAGIC))
    header_end = len(MAGIC) + _HEADER_LEN.size + header_len
    if header_end > len(blob):
        raise TruncatedPayloadError(f"header claims {header_len} bytes but file is {len(blob)} bytes", path)
    try:
        header = json.loads(blob[len(MAGIC) + _HEADER_LEN.size:header_end].decode("utf-8"))
        records = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise TensorFormatError(f"malformed header: {e}", path) from e

    data_start = _align(header_end)
    store = TensorStore(metadata=header.get("metadata") or {})
    for record in records:
        try:
            name = record["name"]
            dtype = StorageDtype(record["dtype"])
            shape = tuple(int(d) for d in record["shape"])
            offset = int(record["offset"])
            nbytes = int(record["nbytes"])
        except (KeyError, ValueError, TypeError) as e:
            raise TensorFormatError(f"malformed tensor record {record!r}: {e}", path) from e

        if offset < 0:
            raise TensorFormatError(f"tensor '{name}' has negative offset {offset}", path)
        if name in store:
            raise DuplicateTensorError(f"duplicate tensor name '{name}'", path)
        count = math.prod(shape)
        if count * dtype.numpy_dtype.itemsize != nbytes or any(d < 1 for d in shape):
            raise PayloadSizeError(
                f"tensor '{name}' shape {shape} needs {count * dtype.numpy_dtype.itemsize} bytes, header says {nbytes}",
                path,
            )
        start = data_start + offset
        if start + nbytes > len(blob):
            raise TruncatedPayloadError(f"payload of '{name}' runs past end of file", path)
        values = np.frombuffer(blob, dtype=dtype.numpy_dtype, count=count, offset=start).reshape(shape)
        store.add(name, values.copy(), dtype)
    return store


# --- Metrics CSV ---

def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def append_metrics_row(path, row):
    """Append one row (writing the header first for a new file); flushed on return"""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    try:
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(METRICS_COLUMNS)
            writer.writerow([_format_cell(getattr(row, col)) for col in METRICS_COLUMNS])
    except OSError as e:
        logger.error(f"Failed to append metrics row to {path}: {e}")
        raise


def read_metrics(path):
    """Re-parse a metrics CSV into MetricsRow objects (exact 64-bit round trip)"""
    try:
        df = pd.read_csv(path, float_precision="round_trip", dtype={"variant": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, FileNotFoundError) as e:
        raise MetricsFormatError(f"{path}: cannot parse metrics file: {e}") from e

    missing = [c for c in METRICS_COLUMNS if c not in df.columns]
    if missing:
        raise MetricsFormatError(f"{path}: missing columns {missing}")

    rows = []
    for record in df.to_dict("records"):
        try:
            entropy = record["attention_entropy_bits"]
            rows.append(MetricsRow(
                step=int(record["step"]),
                layer=int(record["layer"]),
                variant=str(record["variant"]),
                m=int(record["m"]),
                d_in=int(record["d_in"]),
                gamma=float(record["gamma"]),
                lambda1=float(record["lambda1"]),
                mp_gap=float(record["mp_gap"]),
                outlier_count=int(record["outlier_count"]),
                outlier_energy=float(record["outlier_energy"]),
                mp_soft_rank=float(record["mp_soft_rank"]),
                stable_rank=float(record["stable_rank"]),
                attention_entropy_bits=None if pd.isna(entropy) else float(entropy),
            ))
        except (ValueError, TypeError) as e:
            raise MetricsFormatError(f"{path}: malformed row {record}: {e}") from e
    return rows


def _rows_frame(rows):
    df = pd.DataFrame([{col: getattr(r, col) for col in METRICS_COLUMNS} for r in rows])
    df["normalized_stable_rank"] = [r.to_point().metrics.normalized_stable_rank for r in rows]
    return df


def export_heatmap(rows, metric_name, path):
    """
    Layer x step grid of one metric: rows are layers ascending, columns are
    steps ascending, missing cells empty. No interpolation.
    """
    known = METRIC_VALUE_COLUMNS + DERIVED_METRICS
    if metric_name not in known:
        raise UnknownMetricError(f"Unknown metric '{metric_name}'; choose from {', '.join(known)}")
    if not rows:
        raise MetricsFormatError("No metrics rows to export")

    df = _rows_frame(rows)
    if df.duplicated(subset=["step", "layer"]).any():
        raise MetricsFormatError("Metrics contain more than one row per (step, layer)")
    grid = df.pivot(index="layer", columns="step", values=metric_name)
    grid = grid.sort_index(axis=0).sort_index(axis=1)
    grid.columns.name = None
    grid.to_csv(path, index_label="layer", float_format="%.17g", na_rep="")


def write_aggregate(rows, path):
    """One line per logged step: mean and std of every aggregated metric across layers"""
    points = [r.to_point() for r in rows]
    steps = sorted({p.step for p in points})
    has_entropy = all(r.attention_entropy_bits is not None for r in rows)
    names = list(AGGREGATED_METRICS) + (["attention_entropy_bits"] if has_entropy else [])

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step"] + [f"{n}_{stat}" for n in names for stat in ("mean", "std")])
        for step in steps:
            summary = aggregate_layers(points, step)
            line = [str(step)]
            for name in names:
                mean, std = summary[name]
                line += [_format_cell(mean), _format_cell(std)]
            writer.writerow(line)
    return len(steps)


def write_distribution(rows, path, step=None, metrics=AGGREGATED_METRICS):
    """Quantile summary across layers of each metric at one step (default: last)"""
    if not rows:
        raise MetricsFormatError("No metrics rows to summarize")
    step = max(r.step for r in rows) if step is None else step
    at_step = [r for r in rows if r.step == step]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "metric", "min", "q25", "median", "q75", "max"])
        for name in metrics:
            summary = distribution_summary([getattr(r, name) for r in at_step])
            writer.writerow([str(step), name] + [_format_cell(summary[k]) for k in ("min", "q25", "median", "q75", "max")])
    return step
