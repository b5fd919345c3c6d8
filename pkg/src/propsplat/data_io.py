"""Measurement CSV ingestion, local projection, subsampling, splitting and
the binary model file.

Model file layout (all integers unsigned, everything little-endian)::

    offset  size  field
    0       4     magic b"PSPL"
    4       4     u32 format version (currently 1)
    8       8     u64 N, number of Gaussians
    16      8     f64 path-loss exponent gamma
    24      8     f64 frequency in Hz
    32      4     u32 flags: bit 0 = P0 present, bit 1 = origin present
    36      4     u32 reserved, zero
    40      8     f64 P0 in dBm (NaN when absent)
    48      8     f64 origin latitude in degrees (NaN when absent)
    56      8     f64 origin longitude in degrees (NaN when absent)
    64      8     u64 M, length of the metadata block
    72      M     UTF-8 JSON metadata (training config, learning rates, ...)
    72+M    88*N  N records of 11 f64: mu x,y,z; log-scale x,y,z; quat w,x,y,z; offset dB
    end-4   4     u32 CRC-32 (zlib) of every preceding byte
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, TextIO

import numpy as np

from .errors import (ChecksumError, InvalidArgumentError, ModelFileError, SchemaError,
                     TruncatedFileError, VersionMismatchError)
from .measurements import VALUE_KINDS, MeasurementSet
from .model import ModelState

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_TX_ALT_M = 17.0
DEFAULT_RX_ALT_M = 1.5

MAGIC = b"PSPL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQddIIdddQ")
_RECORD_WIDTH = 11

GEODETIC_COLUMNS = ("tx_lat", "tx_lon", "tx_alt_m", "rx_lat", "rx_lon", "rx_alt_m",
                    "freq_hz", "path_loss_db")
LOCAL_COLUMNS = ("tx_x_m", "tx_y_m", "tx_z_m", "rx_x_m", "rx_y_m", "rx_z_m",
                 "freq_hz", "value_db", "value_kind")


# ---------------------------------------------------------------------------
# Schema and records

@dataclass(frozen=True)
class SchemaDescriptor:
    """Maps logical fields to CSV column names.

    ``mode`` is ``"geodetic"`` (lat/lon/alt) or ``"local"`` (x/y/z meters).
    Altitude columns may be absent; mast and receiver heights then default
    to 17 m and 1.5 m. ``value_kind`` fixes the kind for the whole file;
    when it is None the kind is read from the ``value_kind`` column.
    """

    mode: str = "geodetic"
    columns: dict = field(default_factory=dict)
    value_kind: Optional[str] = "path_loss"

    def __post_init__(self):
        if self.mode not in ("geodetic", "local"):
            raise InvalidArgumentError(f"schema mode must be geodetic or local, got {self.mode!r}")
        if self.value_kind is not None and self.value_kind not in VALUE_KINDS:
            raise InvalidArgumentError(f"unknown value kind {self.value_kind!r}")
        defaults = dict(zip(self.roles(self.mode), GEODETIC_COLUMNS if self.mode == "geodetic"
                            else LOCAL_COLUMNS))
        if self.value_kind is not None:
            defaults.pop("value_kind", None)
        if self.mode == "geodetic" and self.value_kind == "rssi":
            defaults["value"] = "rssi_dbm"
        defaults.update(self.columns)
        object.__setattr__(self, "columns", defaults)

    @staticmethod
    def roles(mode: str) -> tuple:
        if mode == "geodetic":
            return ("tx_a", "tx_b", "tx_alt", "rx_a", "rx_b", "rx_alt", "freq", "value")
        return ("tx_a", "tx_b", "tx_alt", "rx_a", "rx_b", "rx_alt", "freq", "value",
                "value_kind")

    @classmethod
    def geodetic(cls, **kw) -> "SchemaDescriptor":
        return cls("geodetic", **kw)

    @classmethod
    def local(cls, **kw) -> "SchemaDescriptor":
        kw.setdefault("value_kind", None)
        return cls("local", **kw)

    @classmethod
    def detect(cls, header: Sequence[str]) -> "SchemaDescriptor":
        """Pick the canonical schema that matches a header row."""
        names = set(header)
        if {"tx_x_m", "rx_x_m"} <= names:
            if "value_kind" in names:
                return cls.local()
            return cls.local(value_kind="path_loss")
        if {"tx_lat", "rx_lat"} <= names:
            return cls.geodetic(value_kind="rssi" if "rssi_dbm" in names else "path_loss")
        raise SchemaError([(1, "", "header matches neither the geodetic nor the local schema")])

    def header(self) -> list:
        return [self.columns[r] for r in self.roles(self.mode) if r in self.columns]


@dataclass(frozen=True)
class RawRecord:
    """One parsed row. For geodetic rows ``tx``/``rx`` are (lat, lon, alt);
    for local rows they are (x, y, z) meters."""

    tx: tuple
    rx: tuple
    frequency_hz: float
    value_db: float
    value_kind: str
    geodetic: bool


@dataclass(frozen=True)
class DatasetManifest:
    mode: str
    origin: Optional[tuple]
    frequencies: tuple
    count: int
    value_kind: str


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("not finite")
    return value


def parse_measurements(stream: TextIO, schema: Optional[SchemaDescriptor] = None
                       ) -> list[RawRecord]:
    """Parse every row or raise :class:`SchemaError` listing all bad fields.

    Line numbers count the header as line 1. Rows are never dropped.
    """
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError([(1, "", "missing header row")]) from None
    if schema is None:
        schema = SchemaDescriptor.detect(header)
    index = {name: i for i, name in enumerate(header)}
    optional = {"tx_alt", "rx_alt"}
    missing = [schema.columns[r] for r in schema.roles(schema.mode)
               if r in schema.columns and r not in optional and schema.columns[r] not in index]
    if missing:
        raise SchemaError([(1, name, "required column missing from header") for name in missing])
    geodetic = schema.mode == "geodetic"
    records, problems, kinds = [], [], set()

    def cell(row, role, lineno):
        name = schema.columns[role]
        if name not in index:
            return None
        i = index[name]
        if i >= len(row):
            problems.append((lineno, name, "missing field"))
            return None
        return row[i].strip()

    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        values = {}
        for role in ("tx_a", "tx_b", "tx_alt", "rx_a", "rx_b", "rx_alt", "freq", "value"):
            text = cell(row, role, lineno)
            if text is None:
                continue
            try:
                values[role] = _parse_float(text)
            except ValueError:
                problems.append((lineno, schema.columns[role], f"not a finite number: {text!r}"))
        if schema.value_kind is None:
            kind = cell(row, "value_kind", lineno)
            if kind not in VALUE_KINDS:
                problems.append((lineno, schema.columns["value_kind"],
                                 f"value kind must be one of {VALUE_KINDS}, got {kind!r}"))
                continue
        else:
            kind = schema.value_kind
        if not all(r in values for r in ("tx_a", "tx_b", "rx_a", "rx_b", "freq", "value")):
            continue
        if geodetic:
            for role, lim, what in (("tx_a", 90, "latitude"), ("rx_a", 90, "latitude"),
                                    ("tx_b", 180, "longitude"), ("rx_b", 180, "longitude")):
                if abs(values[role]) > lim:
                    problems.append((lineno, schema.columns[role],
                                     f"{what} {values[role]} outside [-{lim}, {lim}]"))
        if values["freq"] <= 0:
            problems.append((lineno, schema.columns["freq"], "frequency must be positive"))
        kinds.add(kind)
        records.append(RawRecord(
            (values["tx_a"], values["tx_b"], values.get("tx_alt", DEFAULT_TX_ALT_M)),
            (values["rx_a"], values["rx_b"], values.get("rx_alt", DEFAULT_RX_ALT_M)),
            values["freq"], values["value"], kind, geodetic))
    if len(kinds) > 1:
        problems.append((0, schema.columns.get("value_kind", ""),
                         f"mixed value kinds in one file: {sorted(kinds)}"))
    if problems:
        raise SchemaError(problems)
    return records


def write_measurements(records: Sequence[RawRecord], stream: TextIO,
                       schema: Optional[SchemaDescriptor] = None) -> None:
    """Write records with ``repr`` floats, so parsing them back is bit-exact."""
    records = list(records)
    if schema is None:
        geodetic = records[0].geodetic if records else True
        kind = records[0].value_kind if records else "path_loss"
        schema = (SchemaDescriptor.geodetic(value_kind=kind) if geodetic
                  else SchemaDescriptor.local())
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(schema.header())
    for r in records:
        row = [repr(float(v)) for v in (*r.tx, *r.rx, r.frequency_hz, r.value_db)]
        if schema.value_kind is None:
            row.append(r.value_kind)
        writer.writerow(row)


# ---------------------------------------------------------------------------
# Projection

def geo_to_local(lat, lon, alt, origin) -> np.ndarray:
    """Equirectangular tangent-plane projection about ``origin = (lat0, lon0)``.

    ``x = R cos(lat0) dlon``, ``y = R dlat``, ``z = alt`` (radians, R = 6371 km).
    Distances differ from great-circle values by well under 0.5 % within a
    30 km extent at mid latitudes.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    alt = np.asarray(alt, dtype=np.float64)
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise InvalidArgumentError("latitude must lie in [-90, 90] and longitude in [-180, 180]")
    lat0, lon0 = (float(v) for v in origin)
    x = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * np.radians(lon - lon0)
    y = EARTH_RADIUS_M * np.radians(lat - lat0)
    return np.stack(np.broadcast_arrays(x, y, alt), axis=-1)


def local_to_geo(xyz, origin) -> np.ndarray:
    """Inverse of :func:`geo_to_local`; returns ``(..., 3)`` lat, lon, alt."""
    xyz = np.asarray(xyz, dtype=np.float64)
    lat0, lon0 = (float(v) for v in origin)
    lat = lat0 + np.degrees(xyz[..., 1] / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(xyz[..., 0] / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return np.stack([lat, lon, xyz[..., 2]], axis=-1)


def haversine_m(lat1, lon1, lat2, lon2) -> np.ndarray:
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


def records_to_measurements(records: Sequence[RawRecord], origin: Optional[tuple] = None
                            ) -> tuple[MeasurementSet, DatasetManifest]:
    """Convert parsed rows to a :class:`MeasurementSet` in local meters.

    Geodetic rows are projected about ``origin``; when it is not given the
    first row's transmitter latitude and longitude are used.
    """
    records = list(records)
    kind = records[0].value_kind if records else "path_loss"
    geodetic = bool(records) and records[0].geodetic
    if not records:
        return MeasurementSet.empty(kind), DatasetManifest("local", origin, (), 0, kind)
    tx = np.array([r.tx for r in records])
    rx = np.array([r.rx for r in records])
    if geodetic:
        if origin is None:
            origin = (float(tx[0, 0]), float(tx[0, 1]))
        tx = geo_to_local(tx[:, 0], tx[:, 1], tx[:, 2], origin)
        rx = geo_to_local(rx[:, 0], rx[:, 1], rx[:, 2], origin)
    freq = np.array([r.frequency_hz for r in records])
    data = MeasurementSet(tx, rx, freq, [r.value_db for r in records], kind)
    manifest = DatasetManifest("geodetic" if geodetic else "local",
                               tuple(origin) if geodetic else None,
                               tuple(float(f) for f in np.unique(freq)), len(records), kind)
    return data, manifest


def measurements_to_records(data: MeasurementSet) -> list[RawRecord]:
    return [RawRecord(tuple(map(float, data.tx[i])), tuple(map(float, data.rx[i])),
                      float(data.frequency_hz[i]), float(data.target[i]), data.value_kind, False)
            for i in range(len(data))]


def load_measurements(path, schema: Optional[SchemaDescriptor] = None,
                      origin: Optional[tuple] = None) -> tuple[MeasurementSet, DatasetManifest]:
    with open(path, newline="", encoding="utf-8") as fh:
        records = parse_measurements(fh, schema)
    return records_to_measurements(records, origin)


def save_measurements(data: MeasurementSet, path) -> None:
    """Write a local-mode CSV (``tx_x_m, ..., value_db, value_kind``)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_measurements(measurements_to_records(data), fh, SchemaDescriptor.local())


# ---------------------------------------------------------------------------
# Subsampling and splitting

def spatial_subsample(dataset: MeasurementSet, spacing: float,
                      rng: Optional[np.random.Generator] = None
                      ) -> tuple[MeasurementSet, MeasurementSet]:
    """Greedy thinning along the dataset's order.

    A measurement is kept when its receiver is at least ``spacing`` meters
    (horizontal distance) from every receiver kept before it. The rule is
    deterministic; ``rng`` is accepted for interface symmetry and unused.
    """
    keep = subsample_indices(dataset.rx[:, :2], spacing)
    mask = np.zeros(len(dataset), dtype=bool)
    mask[keep] = True
    return dataset[mask], dataset[~mask]


def subsample_indices(points_xy: np.ndarray, spacing: float) -> np.ndarray:
    pts = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    if spacing < 0 or not math.isfinite(spacing):
        raise InvalidArgumentError(f"spacing must be a non-negative number, got {spacing}")
    if spacing == 0:
        return np.arange(pts.shape[0])
    cells: dict = {}
    kept = []
    s2 = spacing * spacing
    for i, (x, y) in enumerate(pts):
        cx, cy = int(math.floor(x / spacing)), int(math.floor(y / spacing))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for j in cells.get((cx + dx, cy + dy), ()):
                    px, py = pts[j]
                    if (px - x) ** 2 + (py - y) ** 2 < s2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            kept.append(i)
            cells.setdefault((cx, cy), []).append(i)
    return np.array(kept, dtype=np.int64)


@dataclass(frozen=True)
class RandomFraction:
    fraction: float


@dataclass(frozen=True)
class Spatial:
    spacing: float


def split_dataset(dataset: MeasurementSet, strategy, rng: Optional[np.random.Generator] = None
                  ) -> tuple[MeasurementSet, MeasurementSet]:
    """Partition into (train, test); both keep the original record order."""
    if isinstance(strategy, Spatial):
        return spatial_subsample(dataset, strategy.spacing, rng)
    if not isinstance(strategy, RandomFraction):
        raise InvalidArgumentError(f"unknown split strategy {strategy!r}")
    f = strategy.fraction
    if not 0 < f < 1:
        raise InvalidArgumentError(f"train fraction must lie in (0, 1), got {f}")
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(dataset)
    n_train = int(round(f * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_train]] = True
    return dataset[mask], dataset[~mask]


# ---------------------------------------------------------------------------
# Model file

def model_to_bytes(model: ModelState) -> bytes:
    meta = json.dumps(model.metadata, sort_keys=True, default=_json_default).encode("utf-8")
    flags = (1 if model.p0_dbm is not None else 0) | (2 if model.origin is not None else 0)
    origin = model.origin if model.origin is not None else (math.nan, math.nan)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, model.n_gaussians, model.gamma,
                          model.frequency_hz, flags, 0,
                          math.nan if model.p0_dbm is None else model.p0_dbm,
                          float(origin[0]), float(origin[1]), len(meta))
    body = np.column_stack([model.mu, model.log_scale, model.quat, model.offset[:, None]])
    payload = header + meta + np.ascontiguousarray(body, dtype="<f8").tobytes()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def model_from_bytes(blob: bytes) -> ModelState:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model file version {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < _HEADER.size + 4:
        raise TruncatedFileError(f"file has {len(blob)} bytes, header alone needs {_HEADER.size + 4}")
    (_, _, n, gamma, freq, flags, _, p0, lat0, lon0, m) = _HEADER.unpack_from(blob, 0)
    expected = _HEADER.size + m + 8 * _RECORD_WIDTH * n + 4
    if len(blob) < expected:
        raise TruncatedFileError(f"file has {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected:
        raise ModelFileError(f"file has {len(blob) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[:expected - 4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC-32 mismatch; file is corrupted")
    meta = json.loads(blob[_HEADER.size:_HEADER.size + m].decode("utf-8")) if m else {}
    body = np.frombuffer(blob, dtype="<f8", count=_RECORD_WIDTH * n,
                         offset=_HEADER.size + m).reshape(n, _RECORD_WIDTH).astype(np.float64)
    return ModelState(body[:, 0:3], body[:, 3:6], body[:, 6:10], body[:, 10], gamma, freq,
                      p0_dbm=p0 if flags & 1 else None,
                      origin=(lat0, lon0) if flags & 2 else None, metadata=meta)


def save_model(model: ModelState, path) -> None:
    """Write atomically: the target is replaced only once the file is complete."""
    path = Path(path)
    blob = model_to_bytes(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> ModelState:
    return model_from_bytes(Path(path).read_bytes())


def file_crc32(path) -> int:
    return zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__} in model metadata")
