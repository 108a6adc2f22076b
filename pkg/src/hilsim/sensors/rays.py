"""Ray-direction grids for the scanning range sensor.

A grid is the cross product of vertical channels and horizontal azimuth
steps.  Directions are unit vectors in the sensor frame (x forward,
y left, z up).  Wide fields of view are split into sectors of at most
120 degrees so each sector can be rendered with a single planar
projection without distortion blowup near +-90 degrees.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class BadScanPattern(Exception):
    pass


# Widest azimuth span a single planar projection is allowed to cover.
SECTOR_MAX_DEG = 120.0
# FoVs above this get sectored; anything at or below renders in one pass.
SECTOR_SPLIT_THRESHOLD_DEG = 170.0


@dataclass(frozen=True)
class RayGrid:
    """Ray bundle: per-ray azimuth/elevation (radians) and unit directions.

    ``rows``/``cols`` record where each ray came from: (channel, column)
    for regular grids, (0, line-index) for file-loaded patterns.
    """

    azimuth: np.ndarray  # (n,) radians, 0 = straight ahead, +left
    elevation: np.ndarray  # (n,) radians, + up
    directions: np.ndarray  # (n, 3) unit vectors, sensor frame
    rows: np.ndarray  # (n,) int provenance
    cols: np.ndarray  # (n,) int provenance

    def __len__(self) -> int:
        return len(self.azimuth)


def _directions(azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    ce = np.cos(elevation)
    return np.stack(
        [ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)],
        axis=1,
    )


def grid_columns(h_fov_deg: float, h_res_deg: float) -> int:
    # 150/0.1 lands just below 1500 in binary floating point; nudge before
    # flooring so exact-multiple fovs keep every column.
    return int(math.floor(h_fov_deg / h_res_deg + 1e-6))


def build_grid_rays(
    h_fov_deg: float,
    v_fov_deg: float,
    h_res_deg: float,
    channels: int,
) -> RayGrid:
    """Regular grid: channels x columns, channel-major ordering."""
    cols = grid_columns(h_fov_deg, h_res_deg)
    if cols < 1 or channels < 1:
        raise ValueError("grid must have at least one column and one channel")
    az_cols = np.radians(-h_fov_deg / 2.0 + np.arange(cols) * h_res_deg)
    if channels == 1:
        el_rows = np.zeros(1)
    else:
        el_rows = np.radians(np.linspace(-v_fov_deg / 2.0, v_fov_deg / 2.0, channels))
    azimuth = np.tile(az_cols, channels)
    elevation = np.repeat(el_rows, cols)
    rows = np.repeat(np.arange(channels), cols)
    col_idx = np.tile(np.arange(cols), channels)
    return RayGrid(azimuth, elevation, _directions(azimuth, elevation), rows, col_idx)


def load_scan_pattern(path) -> RayGrid:
    """Load a per-ray scan pattern from CSV columns azimuth_deg,elevation_deg."""
    az: list[float] = []
    el: list[float] = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) < 2:
                    raise BadScanPattern(f"line {lineno}: expected two columns")
                a, e = row[0].strip(), row[1].strip()
                try:
                    az.append(float(a))
                    el.append(float(e))
                except ValueError:
                    if lineno == 1:  # optional header row
                        continue
                    raise BadScanPattern(
                        f"line {lineno}: non-numeric values {a!r}, {e!r}"
                    ) from None
    except OSError as exc:
        raise BadScanPattern(f"cannot read scan pattern: {exc}") from exc
    if not az:
        raise BadScanPattern("scan pattern contains no rays")
    azimuth = np.radians(np.asarray(az))
    elevation = np.radians(np.asarray(el))
    rows = np.zeros(len(az), dtype=int)
    cols = np.arange(len(az))
    return RayGrid(azimuth, elevation, _directions(azimuth, elevation), rows, cols)


def sector_count(h_fov_deg: float) -> int:
    if h_fov_deg <= SECTOR_SPLIT_THRESHOLD_DEG:
        return 1
    return int(math.ceil(h_fov_deg / SECTOR_MAX_DEG))


def sector_assignment(grid: RayGrid, h_fov_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Partition rays into azimuth sectors.

    Returns (sector_index per ray, sector center azimuth in radians per
    sector).  Every ray lands in exactly one sector.  Sector boundaries
    come from the actual azimuth extent of the rays so off-center scan
    patterns stay inside their sector's projection frustum.
    """
    n = sector_count(h_fov_deg)
    lo = float(grid.azimuth.min())
    hi = float(grid.azimuth.max())
    span = hi - lo
    if n == 1 or span <= 0.0:
        return np.zeros(len(grid), dtype=int), np.array([(lo + hi) / 2.0])
    width = span / n
    # clip handles the ray sitting exactly on the upper boundary
    idx = np.clip(((grid.azimuth - lo) / width).astype(int), 0, n - 1)
    centers = lo + width * (np.arange(n) + 0.5)
    return idx, centers
