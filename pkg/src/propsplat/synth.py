"""Synthetic obstacle worlds with known path loss, used to verify learning.

Each obstacle adds a constant dB loss to every link whose open segment
enters its open interior; grazing a face, edge or the sphere surface adds
nothing. Labels are the log-distance baseline plus those losses plus optional
Gaussian shadow noise.

World file grammar (one directive per line, ``#`` starts a comment, blank
lines ignored, numbers in any float syntax)::

    gamma_true  <float > 0>
    sigma_noise <float >= 0>          # optional, default 0
    seed        <int>                 # optional, default 0
    box    <x0> <y0> <z0> <x1> <y1> <z1> <loss_db>
    sphere <cx> <cy> <cz> <radius> <loss_db>

Box corners may be given in either order; every extent must be positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DegenerateSegmentError, InvalidArgumentError, SchemaError
from .measurements import MeasurementSet
from .model import baseline_path_loss

DEFAULT_TX_HEIGHT_M = 17.0
DEFAULT_RX_HEIGHT_M = 1.5


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    loss_db: float

    def __post_init__(self):
        lo = np.minimum(self.lo, self.hi)
        hi = np.maximum(self.lo, self.hi)
        if lo.shape != (3,) or not np.all(hi > lo):
            raise InvalidArgumentError(f"box needs positive extent on all axes: {self.lo}, {self.hi}")
        if not math.isfinite(self.loss_db):
            raise InvalidArgumentError("obstacle loss must be finite")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    def crossed(self, tx: np.ndarray, rx: np.ndarray) -> np.ndarray:
        """Whether each segment ``tx -> rx`` enters the open box (slab test)."""
        tx = np.atleast_2d(tx)
        v = np.atleast_2d(rx) - tx
        t_in = np.zeros(tx.shape[0])
        t_out = np.ones(tx.shape[0])
        inside_flat = np.ones(tx.shape[0], dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            for k in range(3):
                lo, hi = self.lo[k], self.hi[k]
                vk = v[:, k]
                flat = vk == 0.0
                inside_flat &= ~flat | ((tx[:, k] > lo) & (tx[:, k] < hi))
                t1 = (lo - tx[:, k]) / vk
                t2 = (hi - tx[:, k]) / vk
                t_in = np.where(flat, t_in, np.maximum(t_in, np.minimum(t1, t2)))
                t_out = np.where(flat, t_out, np.minimum(t_out, np.maximum(t1, t2)))
        return inside_flat & (t_in < t_out)

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p > np.array(self.lo)) & (p < np.array(self.hi)), axis=1)

    def to_line(self) -> str:
        return "box " + " ".join(repr(v) for v in (*self.lo, *self.hi, self.loss_db))


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    loss_db: float

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise InvalidArgumentError(f"sphere radius must be positive, got {self.radius}")
        if not math.isfinite(self.loss_db):
            raise InvalidArgumentError("obstacle loss must be finite")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    def crossed(self, tx: np.ndarray, rx: np.ndarray) -> np.ndarray:
        """Whether each segment comes strictly closer to the center than the radius."""
        tx = np.atleast_2d(tx)
        v = np.atleast_2d(rx) - tx
        w = np.array(self.center) - tx
        vv = np.sum(v * v, axis=1)
        t = np.clip(np.sum(w * v, axis=1) / vv, 0.0, 1.0)
        closest = w - t[:, None] * v
        return np.sum(closest * closest, axis=1) < self.radius ** 2

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.sum((p - np.array(self.center)) ** 2, axis=1) < self.radius ** 2

    def to_line(self) -> str:
        return "sphere " + " ".join(repr(v) for v in (*self.center, self.radius, self.loss_db))


Obstacle = Union[Box, Sphere]


@dataclass
class ObstacleWorld:
    obstacles: list = field(default_factory=list)
    gamma_true: float = 2.0
    sigma_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_true > 0:
            raise InvalidArgumentError(f"gamma_true must be positive, got {self.gamma_true}")
        if not self.sigma_noise >= 0:
            raise InvalidArgumentError(f"sigma_noise must be >= 0, got {self.sigma_noise}")

    def obstacle_loss(self, tx, rx) -> np.ndarray:
        """Summed obstacle loss per link, in obstacle order."""
        tx = np.atleast_2d(np.asarray(tx, dtype=np.float64))
        rx = np.atleast_2d(np.asarray(rx, dtype=np.float64))
        total = np.zeros(tx.shape[0])
        for ob in self.obstacles:
            total += np.where(ob.crossed(tx, rx), ob.loss_db, 0.0)
        return total


def oracle_path_loss(world: ObstacleWorld, tx, rx, frequency_hz: float,
                     rng: Optional[np.random.Generator] = None, noise: bool = True):
    """Ground-truth path loss for one link or arrays of links.

    Noise is drawn from ``rng`` (default: a generator seeded with
    ``world.seed``) when ``world.sigma_noise > 0`` and ``noise`` is true.
    """
    tx_a = np.asarray(tx, dtype=np.float64)
    rx_a = np.asarray(rx, dtype=np.float64)
    single = tx_a.ndim == 1 and rx_a.ndim == 1
    tx2 = np.atleast_2d(tx_a)
    rx2 = np.atleast_2d(rx_a)
    tx2, rx2 = np.broadcast_arrays(tx2, rx2)
    if np.any(np.all(tx2 == rx2, axis=1)):
        raise DegenerateSegmentError("oracle link with coincident endpoints")
    pl = baseline_path_loss(tx2, rx2, frequency_hz, world.gamma_true)
    pl = np.atleast_1d(pl) + world.obstacle_loss(tx2, rx2)
    if noise and world.sigma_noise > 0:
        if rng is None:
            rng = np.random.default_rng(world.seed)
        pl = pl + rng.normal(0.0, world.sigma_noise, size=pl.shape)
    return float(pl[0]) if single else pl


def route_points(waypoints, spacing: float, height: float = DEFAULT_RX_HEIGHT_M) -> np.ndarray:
    """Points every ``spacing`` meters along a polyline, starting at the first waypoint.

    2D waypoints are lifted to ``height``; 3D waypoints keep their z.
    """
    wp = np.asarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] not in (2, 3):
        raise InvalidArgumentError("route needs at least two 2D or 3D waypoints")
    if not spacing > 0:
        raise InvalidArgumentError(f"sample spacing must be positive, got {spacing}")
    if wp.shape[1] == 2:
        wp = np.column_stack([wp, np.full(wp.shape[0], height)])
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    if total == 0.0:
        raise InvalidArgumentError("route has zero length")
    n = int(math.floor(total / spacing + 1e-9)) + 1
    s = np.arange(n) * spacing
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    # skip zero-length segments when locating a sample
    frac = np.divide(s - cum[idx], seg_len[idx], out=np.zeros(n), where=seg_len[idx] > 0)
    return wp[idx] + frac[:, None] * seg[idx]


def generate_drive_test(world: ObstacleWorld, waypoints, spacing: float, tx, frequency_hz: float,
                        rng: Optional[np.random.Generator] = None,
                        rx_height: float = DEFAULT_RX_HEIGHT_M) -> MeasurementSet:
    """Path-loss samples along a route driven past a fixed transmitter."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = route_points(waypoints, spacing, rx_height)
    keep = ~np.all(rx == tx, axis=1)
    rx = rx[keep]
    txs = np.broadcast_to(tx, rx.shape)
    pl = oracle_path_loss(world, txs, rx, frequency_hz, rng)
    return MeasurementSet(txs, rx, frequency_hz, pl, "path_loss")


def grid_positions(extent, spacing: float, height: float) -> np.ndarray:
    """Cell centers of a regular grid over ``(x0, y0, x1, y1)``, row-major in y then x."""
    x0, y0, x1, y1 = (float(v) for v in extent)
    if not spacing > 0:
        raise InvalidArgumentError(f"grid spacing must be positive, got {spacing}")
    if not (x1 > x0 and y1 > y0):
        raise InvalidArgumentError(f"extent must have positive size: {extent}")
    nx = int(math.floor((x1 - x0) / spacing + 1e-9))
    ny = int(math.floor((y1 - y0) / spacing + 1e-9))
    xs = x0 + spacing * (np.arange(nx) + 0.5)
    ys = y0 + spacing * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, height)])


def generate_indoor_grid(world: ObstacleWorld, extent, spacing: float, gateways,
                         frequency_hz: float, p0_true: float,
                         rng: Optional[np.random.Generator] = None,
                         tx_height: float = 1.0) -> list[MeasurementSet]:
    """RSSI records for a transmitter visiting every grid cell center.

    Returns one RSSI-mode set per gateway; in each, ``tx`` is the grid
    position and ``rx`` the gateway. ``RSSI = p0_true - oracle loss``.
    """
    gateways = np.atleast_2d(np.asarray(gateways, dtype=np.float64))
    if gateways.shape[0] < 1 or gateways.shape[1] != 3:
        raise InvalidArgumentError("need at least one 3D gateway position")
    pos = grid_positions(extent, spacing, tx_height)
    if rng is None:
        rng = np.random.default_rng(world.seed)
    out = []
    for gw in gateways:
        rx = np.broadcast_to(gw, pos.shape)
        keep = ~np.all(pos == gw, axis=1)
        rssi = p0_true - oracle_path_loss(world, pos[keep], rx[keep], frequency_hz, rng)
        out.append(MeasurementSet(pos[keep], rx[keep], frequency_hz, rssi, "rssi"))
    return out


def parse_world(text: str) -> ObstacleWorld:
    """Parse the world grammar described in the module docstring."""
    header = {}
    obstacles = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            if key in ("gamma_true", "sigma_noise", "seed"):
                if len(args) != 1:
                    raise ValueError(f"{key} takes one value")
                header[key] = int(args[0]) if key == "seed" else float(args[0])
            elif key == "box":
                if len(args) != 7:
                    raise ValueError("box takes 7 numbers: x0 y0 z0 x1 y1 z1 loss_db")
                v = [float(a) for a in args]
                obstacles.append(Box(tuple(v[0:3]), tuple(v[3:6]), v[6]))
            elif key == "sphere":
                if len(args) != 5:
                    raise ValueError("sphere takes 5 numbers: cx cy cz radius loss_db")
                v = [float(a) for a in args]
                obstacles.append(Sphere(tuple(v[0:3]), v[3], v[4]))
            else:
                raise ValueError(f"unknown directive {key!r}")
        except ValueError as exc:
            # InvalidArgumentError from Box/Sphere is a ValueError too
            raise SchemaError([(lineno, key, str(exc))]) from None
    if "gamma_true" not in header:
        raise SchemaError([(0, "gamma_true", "world file is missing gamma_true")])
    return ObstacleWorld(obstacles, header["gamma_true"], header.get("sigma_noise", 0.0),
                         header.get("seed", 0))


def format_world(world: ObstacleWorld) -> str:
    lines = [f"gamma_true {world.gamma_true!r}", f"sigma_noise {world.sigma_noise!r}",
             f"seed {world.seed}"]
    lines += [ob.to_line() for ob in world.obstacles]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Shipped verification fixtures

FIXTURE_FREQUENCY_HZ = 2.4e9


@dataclass
class Fixture:
    name: str
    world: ObstacleWorld
    train: Union[MeasurementSet, list]
    test: Union[MeasurementSet, list]
    tx: Optional[np.ndarray] = None
    gateways: Optional[np.ndarray] = None
    extent: Optional[tuple] = None
    p0_true: Optional[float] = None
    # training options the verification suite uses for this fixture
    train_options: dict = field(default_factory=dict)


_RING = 2 * np.pi * np.arange(6) / 6
ANISO_MASTS = np.column_stack([500 * np.cos(_RING), 500 * np.sin(_RING), np.full(6, 17.0)])


def _random_links(rng, tx, n, radius, rx_height):
    r = radius * np.sqrt(rng.uniform(0.0025, 1.0, n))
    th = rng.uniform(0, 2 * np.pi, n)
    rx = np.column_stack([tx[0] + r * np.cos(th), tx[1] + r * np.sin(th), np.full(n, rx_height)])
    return np.broadcast_to(tx, rx.shape).copy(), rx


def urban_world(seed: int = 20) -> ObstacleWorld:
    """Twenty random buildings around a mast at the origin."""
    rng = np.random.default_rng(seed)
    obstacles = []
    while len(obstacles) < 20:
        c = rng.uniform(-900, 900, 2)
        if np.hypot(*c) < 150:
            continue
        half = rng.uniform(40, 120, 2)
        h = rng.uniform(20, 45)
        loss = float(np.round(rng.uniform(6, 16), 2))
        obstacles.append(Box((c[0] - half[0], c[1] - half[1], 0.0),
                             (c[0] + half[0], c[1] + half[1], h), loss))
    return ObstacleWorld(obstacles, gamma_true=2.6, sigma_noise=1.0, seed=seed)


def aniso_world(seed: int = 1) -> ObstacleWorld:
    """Five long thin walls inside a ring of six masts.

    Links from different masts cross each wall at different angles, which is
    where a primitive stretched along the wall beats a round one.
    """
    rng = np.random.default_rng(seed)
    obstacles = []
    for _ in range(5):
        c = rng.uniform(-450, 450, 2)
        length = rng.uniform(400, 600)
        half = (length / 2, 2.0) if rng.uniform() < 0.5 else (2.0, length / 2)
        obstacles.append(Box((c[0] - half[0], c[1] - half[1], 0.0),
                             (c[0] + half[0], c[1] + half[1], 40.0), float(rng.uniform(8, 14))))
    return ObstacleWorld(obstacles, gamma_true=2.3, sigma_noise=0.5, seed=seed)


def indoor_world(seed: int = 9) -> ObstacleWorld:
    """A 30 m x 20 m floor with partition walls and a pillar."""
    walls = [
        Box((10.0, 0.0, 0.0), (10.2, 12.0, 3.0), 5.0),
        Box((20.0, 8.0, 0.0), (20.2, 20.0, 3.0), 6.0),
        Box((0.0, 14.0, 0.0), (7.0, 14.2, 3.0), 4.0),
        Box((23.0, 5.0, 0.0), (30.0, 5.2, 3.0), 4.0),
        Sphere((15.0, 15.0, 1.0), 1.2, 3.0),
    ]
    return ObstacleWorld(walls, gamma_true=2.2, sigma_noise=0.0, seed=seed)


INDOOR_EXTENT = (0.0, 0.0, 30.0, 20.0)
INDOOR_GATEWAYS = np.array([[x, y, 2.5] for y in (1.0, 10.0, 19.0) for x in (1.0, 15.0, 29.0)])
INDOOR_P0_DBM = -40.0


def load_fixture(name: str) -> Fixture:
    """Build one of ``aniso-walls``, ``urban-20`` or ``indoor-9gw`` deterministically."""
    if name == "urban-20":
        world = urban_world()
        rng = np.random.default_rng(world.seed + 1000)
        tx = np.array([0.0, 0.0, DEFAULT_TX_HEIGHT_M])
        links = _random_links(rng, tx, 2500, 1000.0, DEFAULT_RX_HEIGHT_M)
        pl = oracle_path_loss(world, *links, FIXTURE_FREQUENCY_HZ, rng)
        data = MeasurementSet(*links, FIXTURE_FREQUENCY_HZ, pl)
        return Fixture(name, world, data[:2000], data[2000:], tx=tx,
                       train_options=dict(n_gaussians=300, iterations=1000))
    if name == "aniso-walls":
        world = aniso_world()
        rng = np.random.default_rng(world.seed + 1000)
        tx = ANISO_MASTS[rng.integers(0, len(ANISO_MASTS), 2500)]
        rx = np.column_stack([rng.uniform(-700, 700, (2500, 2)),
                              np.full(2500, DEFAULT_RX_HEIGHT_M)])
        pl = oracle_path_loss(world, tx, rx, FIXTURE_FREQUENCY_HZ, rng)
        data = MeasurementSet(tx, rx, FIXTURE_FREQUENCY_HZ, pl)
        return Fixture(name, world, data[:2000], data[2000:], tx=ANISO_MASTS,
                       train_options=dict(n_gaussians=300, iterations=1000))
    if name == "indoor-9gw":
        world = indoor_world()
        train = generate_indoor_grid(world, INDOOR_EXTENT, 1.0, INDOOR_GATEWAYS,
                                     FIXTURE_FREQUENCY_HZ, INDOOR_P0_DBM)
        return Fixture(name, world, train, [], gateways=INDOOR_GATEWAYS, extent=INDOOR_EXTENT,
                       p0_true=INDOOR_P0_DBM,
                       train_options=dict(n_gaussians=100, iterations=1000,
                                          learning_rates={"mu": 0.05}))
    raise InvalidArgumentError(f"unknown fixture {name!r}; "
                               f"choose from aniso-walls, urban-20, indoor-9gw")


FIXTURES = ("aniso-walls", "urban-20", "indoor-9gw")
