"""Reproducible Wiener paths on arbitrary grids.

Every random draw in the package comes from a :class:`NoiseStream` keyed by
``(master_seed, role, *indices)``.  Keys map onto numpy ``SeedSequence``
spawn keys feeding a Philox counter-based generator, so trajectory ``j`` of
disorder realization ``i`` produces the same numbers no matter which worker
computes it or in what order.  Gaussian variates use numpy's ziggurat
sampler, which is deterministic for a fixed bit generator.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def role_code(role: str) -> int:
    # blake2b of the utf-8 tag; stable across interpreter runs (unlike hash())
    return int.from_bytes(hashlib.blake2b(role.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    role: str
    indices: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {"master_seed": self.master_seed, "role": self.role, "indices": list(self.indices)}


class NoiseStream:
    """Counter-based random stream; identical keys give identical output."""

    def __init__(self, key: StreamKey):
        if key.master_seed < 0 or key.master_seed >= 2**64:
            raise ValidationError("master_seed must be an unsigned 64-bit integer")
        if any(i < 0 for i in key.indices):
            raise ValidationError("stream indices must be non-negative")
        self.key = key
        seq = np.random.SeedSequence(key.master_seed, spawn_key=(role_code(key.role), *key.indices))
        self.rng = np.random.Generator(np.random.Philox(seq))

    def normal(self, size=None) -> np.ndarray:
        return self.rng.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.rng.random(size)

    def choice(self, n: int, p, size=None):
        return self.rng.choice(n, p=p, size=size)

    def __repr__(self):
        return f"NoiseStream({self.key.master_seed}, {self.key.role!r}, {self.key.indices})"


def derive_stream(master_seed: int, role: str, *indices: int) -> NoiseStream:
    return NoiseStream(StreamKey(int(master_seed), role, tuple(int(i) for i in indices)))


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray
    spacing: str = "explicit"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValidationError("time grid needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("time grid must be finite")
        if pts[0] < 0:
            raise ValidationError("time grid must be non-negative")
        if np.any(np.diff(pts) <= 0):
            raise ValidationError("time grid must be strictly increasing")
        if self.spacing not in ("uniform", "log", "explicit"):
            raise ValidationError(f"unknown spacing {self.spacing!r}")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, t_max: float, n_steps: int, t_min: float = 0.0) -> "TimeGrid":
        return cls(np.linspace(t_min, t_max, n_steps + 1), "uniform")

    @classmethod
    def log(cls, t_min: float, t_max: float, n_points: int) -> "TimeGrid":
        if t_min <= 0:
            raise ValidationError("log grid needs t_min > 0")
        return cls(np.geomspace(t_min, t_max, n_points), "log")

    def bisect(self) -> "TimeGrid":
        """Grid with every interval halved; original points are kept bit-exactly."""
        pts = np.empty(2 * self.points.size - 1)
        pts[0::2] = self.points
        pts[1::2] = 0.5 * (self.points[:-1] + self.points[1:])
        return TimeGrid(pts, self.spacing if self.spacing == "uniform" else "explicit")

    def __len__(self):
        return self.points.size

    @property
    def dt(self) -> float:
        if self.spacing != "uniform":
            raise ValidationError("dt is defined only for uniform grids")
        return float(self.points[1] - self.points[0])


@dataclass(frozen=True)
class WienerPath:
    grid: TimeGrid
    values: np.ndarray
    stream_key: StreamKey | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        if v.shape != self.grid.points.shape:
            raise ValidationError("path values must align with the grid")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    def at(self, t: float) -> float:
        idx = np.searchsorted(self.grid.points, t)
        if idx >= len(self.grid) or not np.isclose(self.grid.points[idx], t, rtol=0, atol=1e-12 * max(1.0, t)):
            raise ValidationError(f"t={t} is not a grid point")
        return float(self.values[idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "W"])
            for t, x in zip(self.grid.points, self.values):
                w.writerow([repr(float(t)), repr(float(x))])


def sample_wiener_path(grid: TimeGrid, stream: NoiseStream, size=None) -> WienerPath | np.ndarray:
    """Exact Brownian path on ``grid`` with W(0) = 0.

    If the grid starts at t0 > 0 the first value is drawn as N(0, t0).  With
    ``size`` given, returns a raw ``(size, len(grid))`` array of independent
    paths instead of a single :class:`WienerPath`.
    """
    t = grid.points
    dts = np.diff(np.concatenate(([0.0], t)))
    shape = (len(t),) if size is None else (size, len(t))
    z = stream.normal(shape)
    values = np.cumsum(z * np.sqrt(dts), axis=-1)
    if size is not None:
        return values
    return WienerPath(grid, values, stream.key)


def refine_path(path: WienerPath, finer: TimeGrid, stream: NoiseStream) -> WienerPath:
    """Brownian-bridge refinement: keeps every original value exactly and
    fills the new points from the conditional law given their neighbours.
    Points past the last original time get free Brownian increments."""
    t_old, w_old = path.grid.points, path.values
    t_new = finer.points
    pos = np.searchsorted(t_new, t_old)
    if np.any(pos >= t_new.size) or not np.array_equal(t_new[np.minimum(pos, t_new.size - 1)], t_old):
        raise ValidationError("finer grid must contain every original grid point")

    # anchor (t=0, W=0) when the original path does not start at zero
    if t_old[0] > 0:
        anchors_t = np.concatenate(([0.0], t_old))
        anchors_w = np.concatenate(([0.0], w_old))
    else:
        anchors_t, anchors_w = t_old, w_old
    if t_new[0] < anchors_t[0]:
        raise ValidationError("finer grid starts before the path")

    free = sample_wiener_path(TimeGrid(np.concatenate(([0.0], t_new)) if t_new[0] > 0 else t_new), stream).values
    if t_new[0] > 0:
        free = free[1:]
    # free BM evaluated at anchors (anchors are all in t_new, or t=0)
    def free_at(times):
        out = np.zeros(times.size)
        idx = np.searchsorted(t_new, times)
        hit = (idx < t_new.size) & (t_new[np.minimum(idx, t_new.size - 1)] == times)
        out[hit] = free[idx[hit]]
        return out

    b_anchor = free_at(anchors_t)
    seg = np.searchsorted(anchors_t, t_new, side="right") - 1
    out = np.empty_like(t_new)
    inside = seg < anchors_t.size - 1
    s = seg[inside]
    ta, tb = anchors_t[s], anchors_t[s + 1]
    frac = (t_new[inside] - ta) / (tb - ta)
    bridge = free[inside] - b_anchor[s] - frac * (b_anchor[s + 1] - b_anchor[s])
    out[inside] = anchors_w[s] + frac * (anchors_w[s + 1] - anchors_w[s]) + bridge
    tail = ~inside
    out[tail] = anchors_w[-1] + free[tail] - b_anchor[-1]
    # pin original points bit-exactly
    out[pos] = w_old
    return WienerPath(finer, out, stream.key)
