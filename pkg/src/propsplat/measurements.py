"""Labeled link measurements, stored column-wise for the compiled kernels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Union

import numpy as np

from .errors import InvalidArgumentError

VALUE_KINDS = ("path_loss", "rssi")


@dataclass(frozen=True)
class Measurement:
    """One labeled link. ``target`` is path loss in dB, or RSSI in dBm."""

    tx: np.ndarray
    rx: np.ndarray
    frequency_hz: float
    target: float

    @property
    def link_distance(self) -> float:
        return float(np.linalg.norm(np.asarray(self.rx) - np.asarray(self.tx)))


class MeasurementSet:
    """Parallel arrays of measurements sharing one ``value_kind``.

    Indexing with an int returns a :class:`Measurement`; indexing with a
    slice, mask or index array returns a new set in that order.
    """

    def __init__(self, tx, rx, frequency_hz, target, value_kind: str = "path_loss"):
        self.tx = np.ascontiguousarray(tx, dtype=np.float64).reshape(-1, 3)
        n = self.tx.shape[0]
        self.rx = np.ascontiguousarray(rx, dtype=np.float64).reshape(n, 3)
        self.frequency_hz = np.ascontiguousarray(
            np.broadcast_to(np.asarray(frequency_hz, dtype=np.float64), (n,)))
        self.target = np.ascontiguousarray(target, dtype=np.float64).reshape(n)
        if value_kind not in VALUE_KINDS:
            raise InvalidArgumentError(f"value_kind must be one of {VALUE_KINDS}, got {value_kind!r}")
        self.value_kind = value_kind
        self.link_distance = np.sqrt(np.sum((self.rx - self.tx) ** 2, axis=1))
        bad = np.flatnonzero(~(self.link_distance > 0) | ~np.isfinite(self.target)
                             | ~(self.frequency_hz > 0))
        if bad.size:
            raise InvalidArgumentError(
                f"measurement {int(bad[0])} is invalid (zero-length link, non-finite target "
                f"or non-positive frequency)")

    @classmethod
    def from_records(cls, records: Iterable[Measurement], value_kind: str = "path_loss"):
        records = list(records)
        if not records:
            return cls.empty(value_kind)
        return cls([r.tx for r in records], [r.rx for r in records],
                   [r.frequency_hz for r in records], [r.target for r in records], value_kind)

    @classmethod
    def empty(cls, value_kind: str = "path_loss") -> "MeasurementSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), value_kind)

    def __len__(self) -> int:
        return self.tx.shape[0]

    def __iter__(self) -> Iterator[Measurement]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, key) -> Union[Measurement, "MeasurementSet"]:
        if isinstance(key, (int, np.integer)):
            return Measurement(self.tx[key].copy(), self.rx[key].copy(),
                               float(self.frequency_hz[key]), float(self.target[key]))
        return MeasurementSet(self.tx[key], self.rx[key], self.frequency_hz[key],
                              self.target[key], self.value_kind)

    def subset(self, index) -> "MeasurementSet":
        return self[np.asarray(index)]

    @property
    def rssi_mode(self) -> bool:
        return self.value_kind == "rssi"

    def frequencies(self) -> np.ndarray:
        return np.unique(self.frequency_hz)

    def single_frequency(self) -> float:
        freqs = self.frequencies()
        if freqs.size != 1:
            raise InvalidArgumentError(
                f"expected one frequency per model, dataset has {freqs.size}: {freqs.tolist()}")
        return float(freqs[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, MeasurementSet):
            return NotImplemented
        return (self.value_kind == other.value_kind
                and all(np.array_equal(a, b) for a, b in
                        [(self.tx, other.tx), (self.rx, other.rx),
                         (self.frequency_hz, other.frequency_hz), (self.target, other.target)]))

    def __repr__(self) -> str:
        return f"MeasurementSet(n={len(self)}, value_kind={self.value_kind!r})"


def as_measurement_set(data, value_kind: str = "path_loss") -> MeasurementSet:
    if isinstance(data, MeasurementSet):
        return data
    return MeasurementSet.from_records(data, value_kind)
