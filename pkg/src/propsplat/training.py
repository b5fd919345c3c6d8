"""Initialization, distance-weighted loss, analytic gradients, Adam and the
training loop.

Gradients follow the forward pass by hand. For a relevant Gaussian ``i`` on
sample ``j`` with ``c = dL/dPL_j * o_i * alpha_ij`` and scaled local
coordinates ``z = diag(1/s) R^T delta``:

* ``dL/do_i      = dL/dPL_j * alpha_ij``
* ``dL/dlog s_k  = c * z_k^2``
* ``dL/dR[m, k]  = -c * delta_m * z_k / s_k``
* ``dL/dmu       = c * (b - (b.u) u)`` with ``b = R (z / s)``

The relevance gate contributes no gradient. Rotation gradients are pushed
through the quaternion-to-matrix map and then through the normalization
``q / |q|``, so the quaternion gradient is tangent to the unit sphere.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, TextIO

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError, NonFiniteGradientError
from .geometry import S_MAX, S_MIN, normalize_quaternion, quat_to_rotation
from .measurements import MeasurementSet, as_measurement_set
from .model import (MIN_DISTANCE_M, ModelState, _frequency_term, baseline_path_loss,
                    influence_matrix)

GAMMA_MIN = 0.5
GAMMA_MAX = 6.0
GROUPS = ("mu", "log_scale", "quat", "offset", "gamma", "p0")
ABLATIONS = ("no_gaussians", "isotropic", "fixed_ple")

DEFAULT_LEARNING_RATES = {
    "mu": 0.5,
    "log_scale": 0.01,
    "quat": 0.005,
    "offset": 0.05,
    "gamma": 0.002,
    "p0": 0.05,
}


@dataclass(frozen=True)
class TrainConfig:
    n_gaussians: int = 9000
    iterations: int = 5000
    batch_size: int = 4096
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_exponent: float = 1.0
    weight_eps: float = 1.0
    init_sigma0: float = 0.3
    init_offset_std: float = 0.1
    gamma_init: float = 2.0
    no_gaussians: bool = False
    isotropic: bool = False
    fixed_ple: bool = False
    rng_seed: int = 0
    strict: bool = True
    log_every: int = 100

    def __post_init__(self):
        lrs = dict(DEFAULT_LEARNING_RATES)
        lrs.update(self.learning_rates)
        object.__setattr__(self, "learning_rates", lrs)
        for name in ("n_gaussians", "iterations", "batch_size"):
            if int(getattr(self, name)) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        unknown = set(lrs) - set(GROUPS)
        if unknown:
            raise InvalidArgumentError(f"unknown learning-rate groups: {sorted(unknown)}")
        if any(not (v > 0) for v in lrs.values()):
            raise InvalidArgumentError(f"learning rates must be positive: {lrs}")
        if not 0.1 <= self.init_sigma0 <= 0.5:
            raise InvalidArgumentError(f"init_sigma0 must lie in [0.1, 0.5], got {self.init_sigma0}")
        if self.init_offset_std < 0 or self.weight_eps < 0:
            raise InvalidArgumentError("init_offset_std and weight_eps must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise InvalidArgumentError("Adam betas must lie in [0, 1) and eps must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


def apply_ablation(config: TrainConfig, flags) -> TrainConfig:
    """Return ``config`` with the named ablations switched on."""
    flags = set(flags)
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise InvalidArgumentError(f"unknown ablation flags: {sorted(unknown)}")
    changes = {name: True for name in flags}
    if "no_gaussians" in flags:
        changes["n_gaussians"] = 0
    return replace(config, **changes) if changes else config


@dataclass
class GradientSet:
    mu: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    offset: np.ndarray
    gamma: float
    p0: Optional[float] = None

    def items(self):
        for name in GROUPS:
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for _, v in self.items()])


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, model: ModelState) -> "AdamState":
        shapes = {
            "mu": model.mu.shape, "log_scale": model.log_scale.shape,
            "quat": model.quat.shape, "offset": model.offset.shape, "gamma": (),
        }
        if model.rssi_mode:
            shapes["p0"] = ()
        return cls({k: np.zeros(s) for k, s in shapes.items()},
                   {k: np.zeros(s) for k, s in shapes.items()})


def initialize_model(dataset, config: TrainConfig, rng: np.random.Generator) -> ModelState:
    """Seed Gaussian centers on random training links.

    Each center sits at a uniform fraction in [0.1, 0.9] along a uniformly
    chosen link; all scales equal ``init_sigma0`` times the median link
    length, rotations are identity and offsets are small normal draws.
    """
    data = as_measurement_set(dataset)
    n = int(config.n_gaussians)
    if len(data) == 0:
        if n > 0:
            raise InvalidArgumentError("cannot initialize Gaussians from an empty dataset")
        raise InvalidArgumentError("dataset is empty; the frequency is undefined")
    freq = data.single_frequency()
    p0 = None
    if data.rssi_mode:
        base = baseline_path_loss(data.tx, data.rx, freq, config.gamma_init)
        p0 = float(np.mean(data.target) + np.mean(base))
    if n == 0:
        return ModelState.empty(freq, config.gamma_init, p0_dbm=p0)
    j = rng.integers(0, len(data), size=n)
    t = rng.uniform(0.1, 0.9, size=n)
    offsets = rng.normal(0.0, config.init_offset_std, size=n)
    mu = data.tx[j] + t[:, None] * (data.rx[j] - data.tx[j])
    scale = config.init_sigma0 * float(np.median(data.link_distance))
    log_scale = np.full((n, 3), math.log(min(max(scale, S_MIN), S_MAX)))
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return ModelState(mu, log_scale, quat, offsets, config.gamma_init, freq, p0_dbm=p0)


def distance_weights(distance: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Per-sample weights ``(d + eps)^p`` normalized to mean 1 over the batch."""
    raw = (np.asarray(distance, dtype=np.float64) + config.weight_eps) ** config.weight_exponent
    return raw / np.mean(raw)


def _predictions(model: ModelState, data: MeasurementSet) -> np.ndarray:
    """Path loss (or RSSI) for every sample; frequency taken from the model."""
    G, offset, cull_r2 = model.packed(None)
    pl = np.empty(len(data))
    _kernels.predict_into(data.tx, data.rx, _frequency_term(model.frequency_hz), model.gamma,
                          G, offset, cull_r2, pl)
    return model.p0_dbm - pl if model.rssi_mode else pl


def _check_batch(model: ModelState, batch) -> MeasurementSet:
    data = as_measurement_set(batch, "rssi" if model.rssi_mode else "path_loss")
    if len(data) == 0:
        raise InvalidArgumentError("batch is empty")
    if data.rssi_mode != model.rssi_mode:
        raise InvalidArgumentError(
            f"batch holds {data.value_kind} values but the model is "
            f"{'RSSI' if model.rssi_mode else 'path-loss'} mode")
    return data


def weighted_loss(model: ModelState, batch, config: TrainConfig) -> float:
    """``mean_j w_j (pred_j - target_j)^2`` with distance weights."""
    data = _check_batch(model, batch)
    r = _predictions(model, data) - data.target
    w = distance_weights(data.link_distance, config)
    return float(np.mean(w * r * r))


def _rotation_to_quat_grad(quat: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR (row-major, (N, 9)) into dL/dq for unit quaternions,
    projected onto the tangent space of the unit sphere."""
    w, x, y, z = quat.T
    G = g_rot
    # dR[m,k]/d(w,x,y,z) for the matrix in geometry.quat_to_rotation
    gw = 2 * (-z * G[:, 1] + y * G[:, 2] + z * G[:, 3] - x * G[:, 5] - y * G[:, 6] + x * G[:, 7])
    gx = 2 * (y * G[:, 1] + z * G[:, 2] + y * G[:, 3] - 2 * x * G[:, 4] - w * G[:, 5]
              + z * G[:, 6] + w * G[:, 7] - 2 * x * G[:, 8])
    gy = 2 * (-2 * y * G[:, 0] + x * G[:, 1] + w * G[:, 2] + x * G[:, 3] + z * G[:, 5]
              - w * G[:, 6] + z * G[:, 7] - 2 * y * G[:, 8])
    gz = 2 * (-2 * z * G[:, 0] - w * G[:, 1] + x * G[:, 2] + w * G[:, 3] - 2 * z * G[:, 4]
              + y * G[:, 5] + x * G[:, 6] + y * G[:, 7])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    # normalization Jacobian (I - q q^T) / |q| at |q| = 1
    return gq - np.sum(gq * quat, axis=1, keepdims=True) * quat


def loss_gradients(model: ModelState, batch, config: TrainConfig,
                   n_chunks: int = 0) -> tuple[float, GradientSet]:
    """Weighted loss and its analytic gradient with respect to every parameter.

    ``n_chunks > 0`` splits the batch into that many chunks that may run on
    separate threads; partial sums are reduced in chunk order, so the result
    depends on ``n_chunks`` but never on the thread count.
    """
    data = _check_batch(model, batch)
    B = len(data)
    pred = _predictions(model, data)
    r = pred - data.target
    w = distance_weights(data.link_distance, config)
    loss = float(np.mean(w * r * r))
    dl_dpred = 2.0 * w * r / B
    dl_dpl = -dl_dpred if model.rssi_mode else dl_dpred
    log_d = np.log10(np.maximum(data.link_distance, MIN_DISTANCE_M))
    g_gamma = float(np.sum(dl_dpl * 10.0 * log_d))
    g_p0 = float(np.sum(dl_dpred)) if model.rssi_mode else None

    n = model.n_gaussians
    if n == 0:
        return loss, GradientSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                                 np.zeros(0), g_gamma, g_p0)
    G, offset, _ = model.packed(None)
    rot = np.ascontiguousarray(quat_to_rotation(model.quat).reshape(n, 9))
    inv_s = np.exp(-model.log_scale)
    dl_dpl = np.ascontiguousarray(dl_dpl)
    if n_chunks > 0:
        g_mu, g_ls, g_rot, g_off = _kernels.backward_chunked(
            data.tx, data.rx, dl_dpl, G, rot, inv_s, offset, int(n_chunks))
    else:
        g_mu, g_ls, g_rot, g_off = _kernels.backward(data.tx, data.rx, dl_dpl, G, rot, inv_s,
                                                     offset)
    g_quat = _rotation_to_quat_grad(model.quat, g_rot)
    return loss, GradientSet(g_mu, g_ls, g_quat, g_off, g_gamma, g_p0)


def _loss_delta(model_plus: ModelState, model_minus: ModelState, data: MeasurementSet,
                w: np.ndarray, pred_delta: np.ndarray) -> float:
    """``L(plus) - L(minus)`` written as ``sum w (r+ - r-)(r+ + r-) / B`` so the
    prediction change enters directly instead of through a cancelling difference."""
    r_sum = (_predictions(model_plus, data) - data.target) + (
        _predictions(model_minus, data) - data.target)
    return float(np.sum(w * pred_delta * r_sum) / len(data))


def finite_difference_check(model: ModelState, batch, config: TrainConfig,
                            h: float = 1e-4, grads: Optional[GradientSet] = None,
                            order: int = 4, groups=GROUPS) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Every scalar parameter is perturbed by ``+-h`` (and ``+-2h`` for the
    fourth-order stencil); quaternion coordinates are perturbed and then
    renormalized before evaluation. The change in each prediction is computed
    from the perturbed Gaussian's own contribution (an independent numpy
    evaluation), which keeps the difference quotient free of cancellation in
    the full loss. Returns ``max |g_analytic - g_central| / max(|g_central|, 1e-8)``.

    ``order=2`` is the plain ``(L(p+h) - L(p-h)) / 2h`` quotient; its
    truncation error is noticeable for gradient components that are small
    next to the local curvature, so the default is the five-point stencil.
    ``groups`` restricts the check to the named parameter groups.
    """
    if not h > 0:
        raise InvalidArgumentError(f"step h must be positive, got {h}")
    if order not in (2, 4):
        raise InvalidArgumentError(f"order must be 2 or 4, got {order}")
    groups = set(groups)
    if groups - set(GROUPS):
        raise InvalidArgumentError(f"unknown parameter groups: {sorted(groups - set(GROUPS))}")
    data = _check_batch(model, batch)
    if grads is None:
        _, grads = loss_gradients(model, data, config)
    w = distance_weights(data.link_distance, config)
    sign = -1.0 if model.rssi_mode else 1.0
    log_d = np.log10(np.maximum(data.link_distance, MIN_DISTANCE_M))
    worst = 0.0

    def central(diff_at) -> float:
        d1 = diff_at(h)
        if order == 2:
            return d1 / (2 * h)
        return (8.0 * d1 - diff_at(2 * h)) / (12 * h)

    def record(analytic, numeric):
        nonlocal worst
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))

    def contribution(g: ModelState) -> np.ndarray:
        return g.offset[0] * influence_matrix(g, data.tx, data.rx)[0]

    for i in range(model.n_gaussians):
        single = model.copy(mu=model.mu[i:i + 1], log_scale=model.log_scale[i:i + 1],
                            quat=model.quat[i:i + 1], offset=model.offset[i:i + 1])
        for group, width in (("mu", 3), ("log_scale", 3), ("quat", 4), ("offset", 1)):
            if group not in groups:
                continue
            for k in range(width):
                def diff_at(step, group=group, k=k):
                    plus_g, minus_g = _perturb(single, group, k, step)
                    pred_delta = sign * (contribution(plus_g) - contribution(minus_g))
                    return _loss_delta(_splice(model, i, plus_g), _splice(model, i, minus_g),
                                       data, w, pred_delta)

                analytic = getattr(grads, group).reshape(model.n_gaussians, -1)[i, k]
                record(analytic, central(diff_at))

    def gamma_diff(step):
        return _loss_delta(model.copy(gamma=model.gamma + step),
                           model.copy(gamma=model.gamma - step),
                           data, w, sign * 10.0 * (2 * step) * log_d)

    if "gamma" in groups:
        record(grads.gamma, central(gamma_diff))
    if model.rssi_mode and "p0" in groups:
        def p0_diff(step):
            return _loss_delta(model.copy(p0_dbm=model.p0_dbm + step),
                               model.copy(p0_dbm=model.p0_dbm - step),
                               data, w, np.full(len(data), 2 * step))

        record(grads.p0, central(p0_diff))
    return worst


def _perturb(single: ModelState, group: str, k: int, h: float):
    out = []
    for step in (h, -h):
        arr = getattr(single, group).copy()
        arr.reshape(-1)[k] += step
        if group == "quat":
            arr = normalize_quaternion(arr)
        out.append(single.copy(**{group: arr}))
    return out


def _splice(model: ModelState, i: int, single: ModelState) -> ModelState:
    arrays = {}
    for group in ("mu", "log_scale", "quat", "offset"):
        arr = getattr(model, group).copy()
        arr[i] = getattr(single, group)[0]
        arrays[group] = arr
    return model.copy(**arrays)


def random_gradcheck_case(rng: np.random.Generator, n_gaussians: int = 5, batch: int = 8,
                          rssi: bool = False, margin: float = 1e-3):
    """A random small model and batch for gradient checks.

    Scales are anisotropic, rotations random and roughly half the
    Gaussian/link pairs relevant. Pairs whose projection lies within
    ``margin`` of a segment endpoint are redrawn, since the gate is not
    differentiable there.
    """
    while True:
        tx = rng.uniform(-10, 10, (batch, 3))
        rx = rng.uniform(-10, 10, (batch, 3))
        d = np.linalg.norm(rx - tx, axis=1)
        if np.any(d < 1.0):
            continue
        mu = rng.uniform(-12, 12, (n_gaussians, 3))
        u = (rx - tx) / d[:, None]
        l = np.einsum("nbk,bk->nb", mu[:, None, :] - tx[None], u)
        if np.any(np.abs(l) < margin) or np.any(np.abs(l - d) < margin):
            continue
        break
    freq = 2.4e9
    model = ModelState(
        mu,
        rng.uniform(np.log(1.0), np.log(8.0), (n_gaussians, 3)),
        normalize_quaternion(rng.normal(size=(n_gaussians, 4))),
        rng.normal(0.0, 8.0, n_gaussians),
        rng.uniform(1.6, 3.5), freq,
        p0_dbm=float(rng.uniform(-20, 10)) if rssi else None,
    )
    pred = _predictions(model, MeasurementSet(tx, rx, freq, np.zeros(batch),
                                              "rssi" if rssi else "path_loss"))
    target = pred + rng.normal(0.0, 5.0, batch)
    data = MeasurementSet(tx, rx, freq, target, "rssi" if rssi else "path_loss")
    return model, data


def adam_step(model: ModelState, grads: GradientSet, state: AdamState, config: TrainConfig,
              frozen=()) -> tuple[ModelState, AdamState]:
    """One bias-corrected Adam update per parameter group.

    Groups named in ``frozen`` keep their values. Afterwards quaternions are
    renormalized, log-scales clamped to the scale range and gamma clamped to
    ``[0.5, 6]``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    step = state.step + 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    params = {
        "mu": model.mu, "log_scale": model.log_scale, "quat": model.quat,
        "offset": model.offset, "gamma": np.float64(model.gamma),
        "p0": None if model.p0_dbm is None else np.float64(model.p0_dbm),
    }
    new_m, new_v, new_p = {}, {}, {}
    for name, g in grads.items():
        if name not in state.m:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        if name in frozen:
            new_p[name] = params[name]
            continue
        new_p[name] = params[name] - config.learning_rates[name] * (m / c1) / (
            np.sqrt(v / c2) + eps)
    quat = new_p.get("quat", model.quat)
    if quat.shape[0] and "quat" not in frozen:
        quat = normalize_quaternion(quat)
    updated = model.copy(
        mu=new_p.get("mu", model.mu),
        log_scale=np.clip(new_p.get("log_scale", model.log_scale), math.log(S_MIN), math.log(S_MAX)),
        quat=quat,
        offset=new_p.get("offset", model.offset),
        gamma=float(np.clip(new_p.get("gamma", model.gamma), GAMMA_MIN, GAMMA_MAX)),
        p0_dbm=None if model.p0_dbm is None else float(new_p.get("p0", model.p0_dbm)),
    )
    return updated, AdamState(new_m, new_v, step)


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    loss: float
    gamma: float
    wall_s: float


def train(dataset, config: TrainConfig, rng: Optional[np.random.Generator] = None,
          log: Optional[TextIO] = None, n_chunks: int = 0,
          callback: Optional[Callable[[int, ModelState], None]] = None
          ) -> tuple[ModelState, list[HistoryEntry]]:
    """Fit a model to ``dataset``.

    Initialization and batch sampling draw from separate child streams of
    ``rng`` (default: seeded from ``config.rng_seed``), so the batch sequence
    does not depend on how many Gaussians were initialized. ``history`` holds
    the batch loss before each step; a final entry records the full-dataset
    loss of the returned model. Progress lines go to ``log`` as
    ``iteration<TAB>loss<TAB>gamma<TAB>wall_s``.
    """
    data = as_measurement_set(dataset)
    if len(data) == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    init_rng, batch_rng = rng.spawn(2)
    if config.no_gaussians and config.n_gaussians:
        config = replace(config, n_gaussians=0)
    model = initialize_model(data, config, init_rng)
    model.metadata.update(training_config=config.to_dict())
    state = AdamState.zeros_like(model)
    frozen = {"gamma"} if config.fixed_ple else set()
    if config.isotropic:
        frozen.add("quat")
    if n_chunks and config.strict:
        n_chunks = 0
    batch_size = min(config.batch_size or len(data), len(data))
    full_batch = batch_size == len(data)
    history = []
    t0 = time.perf_counter()
    if log is not None:
        log.write("iteration\tloss\tgamma\twall_s\n")
    for it in range(config.iterations):
        if full_batch:
            batch = data
        else:
            batch = data.subset(np.sort(batch_rng.choice(len(data), batch_size, replace=False)))
        loss, grads = loss_gradients(model, batch, config, n_chunks=n_chunks)
        if config.isotropic and model.n_gaussians:
            tied = grads.log_scale.sum(axis=1, keepdims=True)
            grads.log_scale = np.repeat(tied, 3, axis=1)
            grads.quat = np.zeros_like(grads.quat)
        if config.fixed_ple:
            grads.gamma = 0.0
        entry = HistoryEntry(it, loss, model.gamma, time.perf_counter() - t0)
        history.append(entry)
        if log is not None and (it % max(config.log_every, 1) == 0):
            log.write(f"{it}\t{loss:.6f}\t{model.gamma:.6f}\t{entry.wall_s:.3f}\n")
        model, state = adam_step(model, grads, state, config, frozen=frozen)
        if callback is not None:
            callback(it, model)
    final = HistoryEntry(config.iterations, weighted_loss(model, data, config), model.gamma,
                         time.perf_counter() - t0)
    history.append(final)
    if log is not None:
        log.write(f"{final.iteration}\t{final.loss:.6f}\t{final.gamma:.6f}\t{final.wall_s:.3f}\n")
    return model, history


def least_squares_gamma(dataset) -> float:
    """Closed-form path-loss exponent for a model without Gaussians.

    Path-loss mode fits ``target - frequency term = 10 gamma log10 d``; RSSI
    mode fits intercept and slope jointly. Unweighted.
    """
    data = as_measurement_set(dataset)
    freq = data.single_frequency()
    x = 10.0 * np.log10(np.maximum(data.link_distance, MIN_DISTANCE_M))
    if data.rssi_mode:
        A = np.column_stack([np.ones_like(x), -x])
        coef, *_ = np.linalg.lstsq(A, data.target, rcond=None)
        return float(coef[1])
    y = data.target - _frequency_term(freq)
    return float(np.dot(x, y) / np.dot(x, x))
