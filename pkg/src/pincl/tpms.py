"""Triply periodic minimal surface voxel generation.

Level sets are evaluated at voxel centers on the unit cell [0,1]^3.
Solid-network cells occupy phi > c; sheet-network cells occupy -c <= phi <= c.
Volume fraction is the occupied share of the voxel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi
FOUR_PI = 4.0 * np.pi


def _gyroid(x, y, z):
    return (np.sin(TWO_PI * x) * np.cos(TWO_PI * y)
            + np.sin(TWO_PI * y) * np.cos(TWO_PI * z)
            + np.sin(TWO_PI * z) * np.cos(TWO_PI * x))


def _diamond(x, y, z):
    sx, sy, sz = np.sin(TWO_PI * x), np.sin(TWO_PI * y), np.sin(TWO_PI * z)
    cx, cy, cz = np.cos(TWO_PI * x), np.cos(TWO_PI * y), np.cos(TWO_PI * z)
    return sx * sy * sz + sx * cy * cz + cx * sy * cz + cx * cy * sz


def _fischer_koch_s(x, y, z):
    return (np.cos(FOUR_PI * x) * np.sin(TWO_PI * y) * np.cos(TWO_PI * z)
            + np.cos(TWO_PI * x) * np.cos(FOUR_PI * y) * np.sin(TWO_PI * z)
            + np.sin(TWO_PI * x) * np.cos(TWO_PI * y) * np.cos(FOUR_PI * z))


LEVEL_SETS = {
    "SchoenGyroid": _gyroid,
    "SchwarzDiamond": _diamond,
    "FischerKochS": _fischer_koch_s,
}

# Thresholds beyond these leave the cell empty or full; chosen from the
# observed range of each level-set field, slightly inside the extremes.
ADMISSIBLE_C = {
    ("SchoenGyroid", "solid"): (-1.4, 1.4),
    ("SchoenGyroid", "sheet"): (0.01, 1.4),
    ("SchwarzDiamond", "solid"): (-1.3, 1.3),
    ("SchwarzDiamond", "sheet"): (0.01, 1.3),
    ("FischerKochS", "solid"): (-1.2, 1.2),
    ("FischerKochS", "sheet"): (0.01, 1.2),
}


@dataclass
class VoxelGrid:
    resolution: int
    occupancy: np.ndarray
    kind: str
    network: str
    c: float

    @property
    def volume_fraction(self) -> float:
        return float(self.occupancy.mean())


def level_set(kind: str, x, y, z):
    """Evaluate the named level-set field at given coordinates."""
    try:
        return LEVEL_SETS[kind](np.asarray(x), np.asarray(y), np.asarray(z))
    except KeyError:
        raise ValueError(f"unknown TPMS kind {kind!r}; choose from {sorted(LEVEL_SETS)}")


def tpms_voxel(kind: str, network: str, resolution: int, c: float,
               admissible: tuple[float, float] | None = None) -> VoxelGrid:
    """Voxelize one TPMS unit cell; raises if the threshold c leaves the
    cell empty or completely full."""
    if kind not in LEVEL_SETS:
        raise ValueError(f"unknown TPMS kind {kind!r}; choose from {sorted(LEVEL_SETS)}")
    if network not in ("solid", "sheet"):
        raise ValueError(f"network must be 'solid' or 'sheet', got {network!r}")
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    lo, hi = admissible if admissible is not None else ADMISSIBLE_C[(kind, network)]
    if not (lo <= c <= hi):
        raise ValueError(f"threshold c={c} outside admissible range [{lo}, {hi}] "
                         f"for {kind}/{network}")
    centers = (np.arange(resolution) + 0.5) / resolution
    x, y, z = np.meshgrid(centers, centers, centers, indexing="ij")
    phi = LEVEL_SETS[kind](x, y, z)
    if network == "solid":
        occupancy = phi > c
    else:
        occupancy = (-c <= phi) & (phi <= c)
    occupied = int(occupancy.sum())
    if occupied == 0 or occupied == occupancy.size:
        raise ValueError(f"threshold c={c} yields {'empty' if occupied == 0 else 'full'} "
                         f"occupancy for {kind}/{network}: inadmissible")
    return VoxelGrid(resolution=resolution, occupancy=occupancy,
                     kind=kind, network=network, c=c)
