"""Triangular fundamental diagrams and the CTM cell constants derived from them.

Units throughout: density in veh/m, flow in veh/s, speeds in m/s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CflViolation, ConfigError, DegenerateFit, InsufficientData

APEX_RTOL = 1e-9


@dataclass(frozen=True)
class FlowSample:
    density: float
    flow: float

    def __post_init__(self):
        if self.density < 0 or self.flow < 0:
            raise ValueError(f"negative sample: {self}")


@dataclass(frozen=True)
class TriangularFD:
    """Triangle with a free-flow leg of slope ``v`` and a congested leg of slope ``-w``.

    Prefer the ``from_speeds`` / ``from_densities`` constructors; the raw
    constructor checks that the five numbers describe a closed triangle.
    """

    v: float
    w: float
    d_c: float
    d_j: float
    q_max: float

    def __post_init__(self):
        if not (self.v > 0 and self.w > 0):
            raise ValueError("v and w must be positive")
        if not (0 < self.d_c < self.d_j):
            raise ValueError("need 0 < d_c < d_j")
        tol = APEX_RTOL * self.q_max
        if abs(self.q_max - self.v * self.d_c) > tol:
            raise ValueError("q_max != v * d_c")
        if abs(self.q_max - self.w * (self.d_j - self.d_c)) > tol:
            raise ValueError("legs do not meet at the apex")

    @classmethod
    def from_speeds(cls, v: float, w: float, d_c: float) -> TriangularFD:
        q_max = v * d_c
        return cls(v=v, w=w, d_c=d_c, d_j=d_c + q_max / w, q_max=q_max)

    @classmethod
    def from_densities(cls, v: float, d_c: float, d_j: float) -> TriangularFD:
        if not (0 < d_c < d_j):
            raise ValueError("need 0 < d_c < d_j")
        q_max = v * d_c
        return cls(v=v, w=q_max / (d_j - d_c), d_c=d_c, d_j=d_j, q_max=q_max)

    def to_record(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in ("v", "w", "d_c", "d_j", "q_max"))

    @classmethod
    def from_record(cls, text: str) -> TriangularFD:
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed FD record line: {line!r}")
            values[key.strip()] = float(value)
        missing = {"v", "w", "d_c", "d_j", "q_max"} - values.keys()
        if missing:
            raise ConfigError(f"FD record missing keys: {sorted(missing)}")
        return cls(**{k: values[k] for k in ("v", "w", "d_c", "d_j", "q_max")})


# Reference diagram: v = 21 m/s, w = 8.4 m/s, d_c = 0.04 veh/m (so d_j = 0.14, q_max = 0.84).
REFERENCE_FD = TriangularFD.from_speeds(v=21.0, w=8.4, d_c=0.04)


@dataclass(frozen=True)
class CellParams:
    """Per-cell CTM constants. ``Q`` and ``N`` are counts, not rates."""

    Q: float  # veh per step
    N: float  # veh
    w_over_v: float
    dt: float  # s
    length: float  # m

    def __post_init__(self):
        if not (self.Q > 0 and self.N > 0 and self.dt > 0 and self.length > 0):
            raise ValueError(f"non-positive cell parameter in {self}")
        if not 0 < self.w_over_v <= 1:
            raise ValueError("w/v must lie in (0, 1]")


def flow_at(fd: TriangularFD, density: float) -> float:
    if density <= fd.d_c:
        return fd.v * density
    if density <= fd.d_j:
        return fd.w * (fd.d_j - density)
    return 0.0


def cell_params(fd: TriangularFD, cell_length: float = 100.0, dt: float | None = None) -> CellParams:
    """CTM constants for one cell; ``dt`` defaults to ``cell_length / v``."""
    if cell_length <= 0:
        raise ValueError("cell_length must be positive")
    limit = cell_length / fd.v
    if dt is None:
        dt = limit
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > limit * (1 + 1e-12):
        raise CflViolation(f"dt={dt} s exceeds cell_length/v = {limit:.4f} s")
    return CellParams(
        Q=fd.d_c * fd.v * dt,
        N=cell_length * fd.d_j,
        w_over_v=fd.w / fd.v,
        dt=dt,
        length=cell_length,
    )


def _candidate_breakpoints(d: np.ndarray, max_candidates: int | None) -> np.ndarray:
    cands = np.unique(d)
    if max_candidates is not None and cands.size > max_candidates:
        idx = np.linspace(0, cands.size - 1, max_candidates).round().astype(int)
        cands = cands[np.unique(idx)]
    return cands


def fit_triangular(samples: Sequence[FlowSample], max_candidates: int | None = None) -> TriangularFD:
    """Least-squares triangle through the origin, with a scanned breakpoint.

    Each candidate breakpoint ``b`` splits the samples into ``density <= b``
    (fit ``q = v d``) and ``density > b`` (fit an unconstrained line, which
    gives ``w`` and ``d_j``). The split with the smallest total squared flow
    residual wins; the critical density is where the two fitted legs cross.
    """
    if len(samples) < 4:
        raise InsufficientData(f"need at least 4 samples, got {len(samples)}")
    d = np.array([s.density for s in samples], dtype=float)
    q = np.array([s.flow for s in samples], dtype=float)
    order = np.argsort(d, kind="stable")
    d, q = d[order], q[order]
    if not np.any(d > d[int(np.argmax(q))]):
        # Nothing beyond the flow peak: the congested leg is unobserved.
        raise InsufficientData("no samples on the congested side of the flow peak")

    best = None
    for b in _candidate_breakpoints(d, max_candidates):
        left = d <= b
        dl, ql = d[left], q[left]
        dr, qr = d[~left], q[~left]
        if dr.size < 2 or np.unique(dr).size < 2 or not np.any(dl > 0):
            continue
        v = float(dl @ ql / (dl @ dl))
        slope, intercept = np.polyfit(dr, qr, 1)
        sse = float(np.sum((ql - v * dl) ** 2) + np.sum((qr - (slope * dr + intercept)) ** 2))
        if best is None or sse < best[0]:
            best = (sse, v, float(slope), float(intercept))
    if best is None:
        raise InsufficientData("samples do not straddle any candidate breakpoint")

    _, v, slope, intercept = best
    w = -slope
    if v <= 0 or w <= 0:
        raise DegenerateFit(f"fitted legs have wrong sign (v={v:.4g}, w={w:.4g})")
    d_j = intercept / w
    d_c = intercept / (v + w)
    if not (0 < d_c < d_j):
        raise DegenerateFit(f"fitted d_c={d_c:.4g} is not below d_j={d_j:.4g}")
    q_max = v * d_c
    return TriangularFD(v=v, w=q_max / (d_j - d_c), d_c=d_c, d_j=d_j, q_max=q_max)


def read_samples_csv(path: str | Path) -> list[FlowSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"density", "flow"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected header 'density,flow'")
        return [FlowSample(float(row["density"]), float(row["flow"])) for row in reader]


def synthetic_samples(
    fd: TriangularFD, per_leg: int = 20, noise: float = 0.0, rng: np.random.Generator | None = None
) -> list[FlowSample]:
    """Evenly spaced samples on both legs, with optional uniform flow noise.

    ``noise`` is the half-width of the noise as a fraction of ``q_max``.
    """
    left = np.linspace(fd.d_c / per_leg, fd.d_c, per_leg)
    right = np.linspace(fd.d_c, fd.d_j, per_leg + 1)[1:]
    out = []
    for dens in np.concatenate([left, right]):
        flow = flow_at(fd, float(dens))
        if noise:
            flow += float(rng.uniform(-noise, noise)) * fd.q_max
        out.append(FlowSample(float(dens), max(flow, 0.0)))
    return out

