"""Forward model: Gaussian influence on a link, offset summation and the
log-distance baseline with a learnable path-loss exponent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateSegmentError, FrequencyMismatchError, InvalidArgumentError
from .geometry import as_point, local_displacement, project_point_onto_segment, quat_to_rotation

SPEED_OF_LIGHT = 299_792_458.0
FSPL_CONSTANT_DB = 20.0 * math.log10(4.0 * math.pi / SPEED_OF_LIGHT)
MIN_DISTANCE_M = 1.0
DEFAULT_CULL_K = 6.0
FREQ_RTOL = 1e-9


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray
    log_scale: np.ndarray
    q: np.ndarray
    offset_db: float

    N_PARAMS = 11

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_scale, self.q, [self.offset_db]])


@dataclass(frozen=True)
class LinkQuery:
    tx: np.ndarray
    rx: np.ndarray
    frequency_hz: float

    def __post_init__(self):
        object.__setattr__(self, "tx", as_point(self.tx, "tx"))
        object.__setattr__(self, "rx", as_point(self.rx, "rx"))
        if not (self.frequency_hz > 0 and math.isfinite(self.frequency_hz)):
            raise InvalidArgumentError(f"frequency must be positive, got {self.frequency_hz}")
        if np.array_equal(self.tx, self.rx):
            raise DegenerateSegmentError(f"tx and rx coincide at {self.tx}")


@dataclass
class ModelState:
    """All learnable parameters for one frequency.

    Gaussian parameters are kept as parallel arrays; ``p0_dbm`` is set only
    for models trained on RSSI, in which case predictions are RSSI values.
    """

    mu: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    offset: np.ndarray
    gamma: float
    frequency_hz: float
    p0_dbm: Optional[float] = None
    origin: Optional[tuple] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(n)
        self.gamma = float(self.gamma)
        self.frequency_hz = float(self.frequency_hz)
        if not self.gamma > 0:
            raise InvalidArgumentError(f"path-loss exponent must be positive, got {self.gamma}")
        if not self.frequency_hz > 0:
            raise InvalidArgumentError(f"frequency must be positive, got {self.frequency_hz}")
        if self.p0_dbm is not None:
            self.p0_dbm = float(self.p0_dbm)

    @classmethod
    def empty(cls, frequency_hz: float, gamma: float = 2.0, **kw) -> "ModelState":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   gamma, frequency_hz, **kw)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[GaussianPrimitive], frequency_hz: float,
                       gamma: float = 2.0, **kw) -> "ModelState":
        if not gaussians:
            return cls.empty(frequency_hz, gamma, **kw)
        return cls(
            np.array([g.mu for g in gaussians]),
            np.array([g.log_scale for g in gaussians]),
            np.array([g.q for g in gaussians]),
            np.array([g.offset_db for g in gaussians]),
            gamma, frequency_hz, **kw,
        )

    @property
    def n_gaussians(self) -> int:
        return self.mu.shape[0]

    @property
    def rssi_mode(self) -> bool:
        return self.p0_dbm is not None

    @property
    def gaussians(self) -> list[GaussianPrimitive]:
        return [
            GaussianPrimitive(self.mu[i].copy(), self.log_scale[i].copy(),
                              self.quat[i].copy(), float(self.offset[i]))
            for i in range(self.n_gaussians)
        ]

    def copy(self, **changes) -> "ModelState":
        fresh = dict(mu=self.mu.copy(), log_scale=self.log_scale.copy(), quat=self.quat.copy(),
                     offset=self.offset.copy(), metadata=dict(self.metadata))
        fresh.update(changes)
        return replace(self, **fresh)

    def without(self, index: int) -> "ModelState":
        keep = np.arange(self.n_gaussians) != index
        return self.copy(mu=self.mu[keep], log_scale=self.log_scale[keep],
                         quat=self.quat[keep], offset=self.offset[keep])

    def packed(self, cull_k: Optional[float] = None):
        """``(G, offset, cull_r2)`` in the layout the compiled kernels expect."""
        n = self.n_gaussians
        G = np.empty((n, 12))
        if n:
            R = quat_to_rotation(self.quat)
            inv_s = np.exp(-self.log_scale)
            G[:, :3] = self.mu
            G[:, 3:] = (np.swapaxes(R, 1, 2) * inv_s[:, :, None]).reshape(n, 9)
        if cull_k is None:
            cull_r2 = np.full(n, np.inf)
        else:
            cull_r2 = (cull_k * np.exp(self.log_scale.max(axis=1))) ** 2 if n else np.zeros(0)
        return G, np.ascontiguousarray(self.offset), cull_r2


@dataclass(frozen=True)
class TraceEntry:
    gaussian_index: int
    l_proj: float
    alpha: float
    contribution_db: float


def baseline_path_loss(tx, rx, frequency_hz, gamma):
    """Log-distance loss ``20 log10 f + 10 gamma log10 max(d, 1 m) + C``.

    ``tx`` and ``rx`` may be single points or ``(n, 3)`` arrays.
    """
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    frequency_hz = np.asarray(frequency_hz, dtype=np.float64)
    if np.any(frequency_hz <= 0):
        raise InvalidArgumentError("frequency must be positive")
    v = rx - tx
    # same operation order as the compiled kernel, so zero-offset predictions equal this exactly
    d = np.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2])
    f_term = 20.0 * np.log10(frequency_hz) + FSPL_CONSTANT_DB
    pl = f_term + 10.0 * gamma * np.log10(np.maximum(d, MIN_DISTANCE_M))
    return float(pl) if np.ndim(pl) == 0 else pl


def gaussian_influence(g: GaussianPrimitive, tx, rx) -> float:
    """Influence of one primitive on the link; exactly 0 outside the relevance gate."""
    proj = project_point_onto_segment(tx, rx, g.mu)
    if not proj.relevant:
        return 0.0
    local = local_displacement(proj.delta, g.q)
    return math.exp(-0.5 * float(np.sum((local / np.exp(g.log_scale)) ** 2)))


def influence_matrix(model: ModelState, tx, rx) -> np.ndarray:
    """Reference ``(N, n_links)`` influence matrix computed in plain numpy.

    Independent of the compiled kernels (libm exp, no exponent floor); used
    as an oracle by the gradient check and the tests.
    """
    tx = np.asarray(tx, dtype=np.float64).reshape(-1, 3)
    rx = np.asarray(rx, dtype=np.float64).reshape(-1, 3)
    v = rx - tx
    d = np.linalg.norm(v, axis=1)
    u = v / d[:, None]
    if model.n_gaussians == 0:
        return np.zeros((0, tx.shape[0]))
    R = quat_to_rotation(model.quat)
    w = model.mu[:, None, :] - tx[None, :, :]
    l = np.einsum("nbk,bk->nb", w, u)
    delta = l[:, :, None] * u[None, :, :] - w
    local = np.einsum("nmk,nbm->nbk", R, delta) / np.exp(model.log_scale)[:, None, :]
    alpha = np.exp(-0.5 * np.sum(local ** 2, axis=2))
    return np.where((l > 0.0) & (l < d[None, :]), alpha, 0.0)


def _check_frequency(model: ModelState, frequency_hz: float) -> None:
    if abs(frequency_hz - model.frequency_hz) > FREQ_RTOL * model.frequency_hz:
        raise FrequencyMismatchError(model.frequency_hz, frequency_hz)


def _frequency_term(frequency_hz: float) -> float:
    return 20.0 * math.log10(frequency_hz) + FSPL_CONSTANT_DB


def delta_path_loss(model: ModelState, tx, rx, cull_k: Optional[float] = None) -> float:
    """Sum of ``offset * influence`` over all Gaussians for one link."""
    tx = as_point(tx, "tx")
    rx = as_point(rx, "rx")
    if np.array_equal(tx, rx):
        raise DegenerateSegmentError(f"tx and rx coincide at {tx}")
    G, offset, cull_r2 = model.packed(cull_k)
    out = np.empty(1)
    # gamma = 0 and f_term = 0 leave only the offset sum (log10(max(d,1)) * 0 == 0)
    _kernels.predict_into(tx[None, :], rx[None, :], 0.0, 0.0, G, offset, cull_r2, out)
    return float(out[0])


def predict(model: ModelState, query: LinkQuery, cull_k: Optional[float] = None) -> float:
    """Predicted path loss in dB, or RSSI in dBm for RSSI-mode models."""
    _check_frequency(model, query.frequency_hz)
    G, offset, cull_r2 = model.packed(cull_k)
    pl = np.empty(1)
    _kernels.predict_into(query.tx[None, :], query.rx[None, :], _frequency_term(model.frequency_hz),
                          model.gamma, G, offset, cull_r2, pl)
    out = model.p0_dbm - pl if model.rssi_mode else pl
    return float(out[0])


def per_gaussian_trace(model: ModelState, query: LinkQuery,
                       cull_k: Optional[float] = None) -> list[TraceEntry]:
    """Relevant Gaussians' contributions ordered by distance from the transmitter."""
    _check_frequency(model, query.frequency_hz)
    G, offset, cull_r2 = model.packed(cull_k)
    alpha, lproj = _kernels.alphas_one(query.tx, query.rx, G, cull_r2)
    idx = np.flatnonzero(alpha >= 0.0)
    idx = idx[np.argsort(lproj[idx], kind="stable")]
    return [TraceEntry(int(i), float(lproj[i]), float(alpha[i]), float(offset[i] * alpha[i]))
            for i in idx]


def query_arrays(queries):
    """``(tx, rx, freq)`` arrays from LinkQuery objects or an array triple."""
    if isinstance(queries, tuple) and len(queries) == 3:
        tx, rx, freq = queries
        tx = np.ascontiguousarray(tx, dtype=np.float64).reshape(-1, 3)
        rx = np.ascontiguousarray(rx, dtype=np.float64).reshape(-1, 3)
        freq = np.broadcast_to(np.asarray(freq, dtype=np.float64), (tx.shape[0],))
        return tx, rx, freq
    queries = list(queries)
    tx = np.array([q.tx for q in queries], dtype=np.float64).reshape(-1, 3)
    rx = np.array([q.rx for q in queries], dtype=np.float64).reshape(-1, 3)
    freq = np.array([q.frequency_hz for q in queries], dtype=np.float64)
    return tx, rx, freq


def predict_batch(model: ModelState, queries, parallel: bool = False,
                  cull_k: Optional[float] = None, validate: bool = True) -> np.ndarray:
    """Vector of predictions.

    ``queries`` is a sequence of :class:`LinkQuery` or a ``(tx, rx, freq)``
    tuple of arrays. Sequential mode matches :func:`predict` bit for bit;
    parallel mode splits queries across threads and gives the same values.
    With ``validate=False`` coincident endpoints are allowed and get the
    clamped baseline with no Gaussian contribution (used for rasters).
    """
    tx, rx, freq = query_arrays(queries)
    if validate and tx.shape[0]:
        bad_freq = np.abs(freq - model.frequency_hz) > FREQ_RTOL * model.frequency_hz
        bad_link = np.all(tx == rx, axis=1)
        bad_val = ~(np.all(np.isfinite(tx), axis=1) & np.all(np.isfinite(rx), axis=1))
        bad = np.flatnonzero(bad_freq | bad_link | bad_val)
        if bad.size:
            j = int(bad[0])
            if bad_freq[j]:
                raise FrequencyMismatchError(model.frequency_hz, freq[j])
            raise InvalidArgumentError(f"query {j} is invalid (coincident or non-finite endpoints)")
    G, offset, cull_r2 = model.packed(cull_k)
    pl = np.empty(tx.shape[0])
    _kernels.predict_into(tx, rx, _frequency_term(model.frequency_hz), model.gamma,
                          G, offset, cull_r2, pl, parallel=parallel)
    return model.p0_dbm - pl if model.rssi_mode else pl
