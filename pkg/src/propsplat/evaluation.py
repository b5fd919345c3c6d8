"""Error metrics, coverage rasters, fingerprint localization and the
structural diagnostics (leave-one-out additivity, sign consistency).

Raster files are written as a flat little-endian float64 array in row-major
order (row 0 is the southern edge ``y = origin_y``, column 0 the western edge)
with a sidecar text header ``<path>.hdr`` of ``key = value`` lines::

    format = propsplat-raster-1
    origin_x = <west edge, m>
    origin_y = <south edge, m>
    cell_size = <m>
    width = <columns>
    height = <rows>
    nodata = nan
    kind = path_loss | rssi | offset
    frequency_hz = <Hz>
    tx = <x> <y> <z>
    rx_height = <m>
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError, ModelFileError
from .geometry import as_point
from .model import ModelState, _frequency_term, predict_batch

RASTER_FORMAT = "propsplat-raster-1"


@dataclass(frozen=True)
class MetricReport:
    mae_db: float
    rmse_db: float
    median_abs_err_db: float
    p95_abs_err_db: float
    n: int

    def as_dict(self) -> dict:
        return {"mae_db": self.mae_db, "rmse_db": self.rmse_db,
                "median_abs_err_db": self.median_abs_err_db,
                "p95_abs_err_db": self.p95_abs_err_db, "n": self.n}

    def to_tsv(self) -> str:
        keys = list(self.as_dict())
        return "\t".join(keys) + "\n" + "\t".join(repr(v) for v in self.as_dict().values()) + "\n"

    def to_table(self) -> str:
        return (f"{'n':>8}  {'MAE':>8}  {'RMSE':>8}  {'median':>8}  {'P95':>8}\n"
                f"{self.n:>8d}  {self.mae_db:>8.3f}  {self.rmse_db:>8.3f}  "
                f"{self.median_abs_err_db:>8.3f}  {self.p95_abs_err_db:>8.3f}")


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the value at 1-based rank ``ceil(pct/100 * n)``."""
    n = len(sorted_values)
    rank = max(1, int(math.ceil(pct / 100.0 * n - 1e-12)))
    return float(sorted_values[rank - 1])


def error_metrics(predictions, truths) -> MetricReport:
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    true = np.asarray(truths, dtype=np.float64).ravel()
    if pred.shape != true.shape:
        raise InvalidArgumentError(f"length mismatch: {pred.size} predictions, {true.size} truths")
    if pred.size == 0:
        raise InvalidArgumentError("no samples to score")
    err = pred - true
    abs_err = np.sort(np.abs(err))
    # scale by the largest error so squaring cannot underflow or overflow
    scale = abs_err[-1]
    rmse = scale * math.sqrt(np.mean((abs_err / scale) ** 2)) if scale > 0 else 0.0
    return MetricReport(
        mae_db=float(np.mean(abs_err)),
        rmse_db=float(rmse),
        median_abs_err_db=float(np.median(abs_err)),
        p95_abs_err_db=nearest_rank(abs_err, 95.0),
        n=int(pred.size),
    )


# ---------------------------------------------------------------------------
# Coverage rasters

@dataclass
class CoverageRaster:
    origin: tuple
    cell_size: float
    values: np.ndarray  # (height, width); row 0 at the southern edge
    tx: np.ndarray
    frequency_hz: float
    rx_height: float = 1.5
    kind: str = "path_loss"
    spatial_mean_db: Optional[float] = None

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def cell_centers(self) -> np.ndarray:
        return raster_cell_centers(self.origin, self.cell_size, self.width, self.height,
                                   self.rx_height)


def raster_cell_centers(origin, cell_size, width, height, z) -> np.ndarray:
    xs = origin[0] + cell_size * (np.arange(width) + 0.5)
    ys = origin[1] + cell_size * (np.arange(height) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))])


def coverage_grid(model: ModelState, tx, extent, cell_size: float, rx_height: float = 1.5,
                  offset_only: bool = False, parallel: bool = False) -> CoverageRaster:
    """Predictions at every cell center of ``extent = (x0, y0, x1, y1)``.

    The cell count per axis is ``ceil(size / cell_size)``. A cell whose
    center coincides with the transmitter gets the clamped 1 m baseline.
    With ``offset_only`` the raster holds the Gaussian field minus its
    spatial mean (the mean is kept in ``spatial_mean_db``).
    """
    tx = as_point(tx, "tx")
    x0, y0, x1, y1 = (float(v) for v in extent)
    if not (cell_size > 0 and x1 > x0 and y1 > y0):
        raise InvalidArgumentError("extent and cell size must be positive")
    width = int(math.ceil((x1 - x0) / cell_size - 1e-9))
    height = int(math.ceil((y1 - y0) / cell_size - 1e-9))
    centers = raster_cell_centers((x0, y0), cell_size, width, height, rx_height)
    txs = np.ascontiguousarray(np.broadcast_to(tx, centers.shape))
    if offset_only:
        G, offset, cull_r2 = model.packed(None)
        out = np.empty(centers.shape[0])
        _kernels.predict_into(txs, centers, 0.0, 0.0, G, offset, cull_r2, out, parallel=parallel)
        mean = float(np.mean(out))
        values, kind = out - mean, "offset"
    else:
        values = predict_batch(model, (txs, centers, model.frequency_hz), parallel=parallel,
                               validate=False)
        mean, kind = None, ("rssi" if model.rssi_mode else "path_loss")
    return CoverageRaster((x0, y0), float(cell_size), values.reshape(height, width), tx,
                          model.frequency_hz, float(rx_height), kind, mean)


def write_raster(raster: CoverageRaster, path) -> tuple[Path, Path]:
    """Write the flat binary raster and its ``.hdr`` sidecar; returns both paths."""
    path = Path(path)
    np.ascontiguousarray(raster.values, dtype="<f8").tofile(path)
    header = path.with_name(path.name + ".hdr")
    lines = {
        "format": RASTER_FORMAT,
        "origin_x": repr(float(raster.origin[0])),
        "origin_y": repr(float(raster.origin[1])),
        "cell_size": repr(raster.cell_size),
        "width": str(raster.width),
        "height": str(raster.height),
        "nodata": "nan",
        "kind": raster.kind,
        "frequency_hz": repr(raster.frequency_hz),
        "tx": " ".join(repr(float(v)) for v in raster.tx),
        "rx_height": repr(raster.rx_height),
    }
    if raster.spatial_mean_db is not None:
        lines["spatial_mean_db"] = repr(raster.spatial_mean_db)
    header.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()), encoding="utf-8")
    return path, header


def read_raster(path) -> CoverageRaster:
    path = Path(path)
    header = path.with_name(path.name + ".hdr")
    meta = {}
    for line in header.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    if meta.get("format") != RASTER_FORMAT:
        raise ModelFileError(f"{header}: not a {RASTER_FORMAT} header")
    width, height = int(meta["width"]), int(meta["height"])
    values = np.fromfile(path, dtype="<f8")
    if values.size != width * height:
        raise ModelFileError(f"{path}: expected {width * height} cells, found {values.size}")
    return CoverageRaster(
        (float(meta["origin_x"]), float(meta["origin_y"])), float(meta["cell_size"]),
        values.reshape(height, width), np.array([float(v) for v in meta["tx"].split()]),
        float(meta["frequency_hz"]), float(meta["rx_height"]), meta["kind"],
        float(meta["spatial_mean_db"]) if "spatial_mean_db" in meta else None,
    )


def write_raster_csv(raster: CoverageRaster, path) -> Path:
    """``x,y,value_db`` rows at cell centers, southern row first."""
    path = Path(path)
    centers = raster.cell_centers()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("x,y,value_db\n")
        for (x, y, _), v in zip(centers, raster.values.ravel()):
            fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")
    return path


# ---------------------------------------------------------------------------
# Fingerprint localization

@dataclass
class FingerprintDB:
    positions: np.ndarray      # (P, 3)
    fingerprints: np.ndarray   # (P, G) RSSI in dBm
    gateway_ids: list
    gateway_positions: np.ndarray  # (G, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.fingerprints = np.asarray(self.fingerprints, dtype=np.float64).reshape(
            self.positions.shape[0], -1)
        self.gateway_positions = np.asarray(self.gateway_positions, dtype=np.float64).reshape(-1, 3)
        if self.fingerprints.shape[1] != len(self.gateway_ids):
            raise InvalidArgumentError("fingerprint width must equal the number of gateways")
        if len(np.unique(self.positions, axis=0)) != self.positions.shape[0]:
            raise InvalidArgumentError("fingerprint positions must be unique")

    @property
    def n_gateways(self) -> int:
        return len(self.gateway_ids)

    def __len__(self) -> int:
        return self.positions.shape[0]


def build_fingerprint_db(models: Mapping, gateways: Mapping, positions,
                         parallel: bool = False) -> FingerprintDB:
    """Predicted RSSI at every grid position for every gateway.

    ``gateways`` maps gateway id to position and fixes the column order;
    ``models`` maps the same ids to RSSI-mode models. The grid position is
    the transmitter and the gateway the receiver, as in training.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    ids = list(gateways)
    missing = [g for g in ids if g not in models]
    if missing:
        raise InvalidArgumentError(f"no model for gateway {missing[0]!r}")
    freqs = {models[g].frequency_hz for g in ids}
    if len(freqs) > 1:
        raise InvalidArgumentError(f"gateway models disagree on frequency: {sorted(freqs)}")
    for g in ids:
        if not models[g].rssi_mode:
            raise InvalidArgumentError(f"model for gateway {g!r} is not in RSSI mode")
    fp = np.empty((positions.shape[0], len(ids)))
    gw_pos = np.array([as_point(gateways[g], f"gateway {g}") for g in ids]).reshape(-1, 3)
    for col, g in enumerate(ids):
        rx = np.ascontiguousarray(np.broadcast_to(gw_pos[col], positions.shape))
        fp[:, col] = predict_batch(models[g], (positions, rx, models[g].frequency_hz),
                                   parallel=parallel, validate=False)
    return FingerprintDB(positions, fp, ids, gw_pos)


@dataclass(frozen=True)
class LocalizationResult:
    position: np.ndarray
    neighbors: np.ndarray
    used_mask: np.ndarray


def knn_localize(db: FingerprintDB, observed, k: int = 5) -> np.ndarray:
    """Unweighted centroid of the ``k`` grid positions nearest in RSSI space."""
    return knn_localize_detail(db, observed, k).position


def knn_localize_detail(db: FingerprintDB, observed, k: int = 5) -> LocalizationResult:
    """As :func:`knn_localize`, also returning neighbor indices and the mask of
    gateways that took part (NaN readings are masked out)."""
    obs = np.asarray(observed, dtype=np.float64).ravel()
    if obs.size != db.n_gateways:
        raise InvalidArgumentError(
            f"observation has {obs.size} entries, database has {db.n_gateways} gateways")
    if not 1 <= k <= len(db):
        raise InvalidArgumentError(f"k must lie in [1, {len(db)}], got {k}")
    mask = ~np.isnan(obs)
    if not mask.any():
        raise InvalidArgumentError("observation has no valid readings")
    diff = db.fingerprints[:, mask] - obs[mask]
    dist2 = np.einsum("pg,pg->p", diff, diff)
    nearest = np.argsort(dist2, kind="stable")[:k]
    return LocalizationResult(db.positions[nearest].mean(axis=0), nearest, mask)


def knn_localize_many(db: FingerprintDB, observations, k: int = 5) -> np.ndarray:
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    return np.array([knn_localize(db, o, k) for o in obs]).reshape(-1, 3)


@dataclass(frozen=True)
class LocalizationReport:
    mean_m: float
    median_m: float
    n: int


def localization_report(estimates, truths, dims: int = 2) -> LocalizationReport:
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    true = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if est.shape != true.shape:
        raise InvalidArgumentError(f"length mismatch: {est.shape} estimates vs {true.shape} truths")
    if dims not in (2, 3):
        raise InvalidArgumentError("dims must be 2 or 3")
    err = np.linalg.norm(est[:, :dims] - true[:, :dims], axis=1)
    if err.size == 0:
        raise InvalidArgumentError("no samples to score")
    return LocalizationReport(float(np.mean(err)), float(np.median(err)), int(err.size))


# ---------------------------------------------------------------------------
# Structural diagnostics

@dataclass(frozen=True)
class DiagnosticsReport:
    max_additivity_error_db: float
    sign_consistency: float
    n_sign_pairs: int
    n_queries: int

    @property
    def sign_set_empty(self) -> bool:
        return self.n_sign_pairs == 0


def diagnostics(model: ModelState, tx, rx) -> DiagnosticsReport:
    """Leave-one-out additivity and sign consistency over the given links.

    For every Gaussian ``i`` the links are re-predicted with ``i`` removed
    (the kernel skips it, which matches predicting with ``model.without(i)``)
    and the change is compared to ``o_i * alpha_i``. Sign consistency counts
    pairs with ``alpha_i > 0`` and ``o_i != 0``; an empty set reports 1.0.
    """
    tx = np.ascontiguousarray(tx, dtype=np.float64).reshape(-1, 3)
    rx = np.ascontiguousarray(rx, dtype=np.float64).reshape(-1, 3)
    q = tx.shape[0]
    if q == 0:
        raise InvalidArgumentError("diagnostics need at least one link")
    if np.any(np.all(tx == rx, axis=1)):
        raise InvalidArgumentError("diagnostic links must have distinct endpoints")
    f_term = _frequency_term(model.frequency_hz)
    G, offset, cull_r2 = model.packed(None)
    full = np.empty(q)
    _kernels.predict_into(tx, rx, f_term, model.gamma, G, offset, cull_r2, full)
    loo = np.empty(q)
    alpha = np.empty((model.n_gaussians, q))
    for j in range(q):
        a, _ = _kernels.alphas_one(tx[j], rx[j], G, cull_r2)
        alpha[:, j] = np.maximum(a, 0.0)
    worst = 0.0
    agree = pairs = 0
    for i in range(model.n_gaussians):
        _kernels.predict_into(tx, rx, f_term, model.gamma, G, offset, cull_r2, loo, skip=i)
        contrib = offset[i] * alpha[i]
        worst = max(worst, float(np.max(np.abs((full - loo) - contrib))))
        active = (alpha[i] > 0) & (offset[i] != 0)
        pairs += int(np.count_nonzero(active))
        agree += int(np.count_nonzero(np.sign(contrib[active]) == np.sign(offset[i])))
    rate = 1.0 if pairs == 0 else agree / pairs
    return DiagnosticsReport(worst, rate, pairs, q)
