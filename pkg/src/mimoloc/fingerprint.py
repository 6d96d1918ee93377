"""Grid-indexed fingerprint database of angle-delay profiles.

One profile per grid point, built by running the full channel pipeline at
each location. Profiles are stored as float32 images (the persisted
precision) in row-major grid order, so a rebuild with identical configs is
byte-identical on disk.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import container
from .adp import DftPair, adp_from_csi, build_dft_pair
from .channel import (
    ArrayConfig,
    Environment,
    OfdmConfig,
    format_environment,
    parse_environment,
    synthesize_csi,
    trace_paths,
)

META_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid of candidate positions.

    Point (row, col) sits at origin + (col*spacing, row*spacing); row-major
    flattening defines the database order and all tie-breaking.
    """

    origin: tuple[float, float]
    spacing: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.spacing <= 0.0:
            raise ValueError("spacing must be positive")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one point")

    @property
    def n_points(self) -> int:
        return self.n_rows * self.n_cols

    def position(self, row: int, col: int) -> np.ndarray:
        return np.array(
            [self.origin[0] + col * self.spacing, self.origin[1] + row * self.spacing]
        )

    def all_positions(self) -> np.ndarray:
        cols, rows = np.meshgrid(np.arange(self.n_cols), np.arange(self.n_rows))
        x = self.origin[0] + cols.ravel() * self.spacing
        y = self.origin[1] + rows.ravel() * self.spacing
        return np.stack([x, y], axis=1)

    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of the grid bounding box."""
        return (
            self.origin[0],
            self.origin[1],
            self.origin[0] + (self.n_cols - 1) * self.spacing,
            self.origin[1] + (self.n_rows - 1) * self.spacing,
        )

    def to_meta(self) -> dict:
        return {
            "origin": [self.origin[0], self.origin[1]],
            "spacing": self.spacing,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "GridSpec":
        return cls(
            origin=(meta["origin"][0], meta["origin"][1]),
            spacing=meta["spacing"],
            n_rows=meta["n_rows"],
            n_cols=meta["n_cols"],
        )


@dataclass
class FingerprintDb:
    """Fingerprints plus the grid they were sampled on.

    Attributes:
        grid: sampling grid.
        positions: (n_points, 2) float64, row-major grid order.
        adps: (n_points, n_t, n_c) float32 profiles.
        meta: build configs; round-trips through the JSON sidecar.
    """

    grid: GridSpec
    positions: np.ndarray
    adps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # Zero-profile points (no traced paths) stay in the database but are
        # flagged so similarity-based consumers can skip them.
        norms = np.linalg.norm(
            self.adps.reshape(len(self.adps), -1).astype(np.float64), axis=1
        )
        self.zero_flags = norms == 0.0

    @property
    def n_t(self) -> int:
        return self.adps.shape[1]

    @property
    def n_c(self) -> int:
        return self.adps.shape[2]


def build_db(
    env: Environment,
    grid: GridSpec,
    array: ArrayConfig,
    ofdm: OfdmConfig,
    dft: DftPair | None = None,
    seed: int | None = None,
) -> FingerprintDb:
    """Build the fingerprint database by simulation at every grid point.

    Deterministic: no randomness is involved, the optional seed is recorded
    in the metadata only so downstream artifacts can echo it.
    """
    if dft is None:
        dft = build_dft_pair(array.n_antennas, ofdm.n_subcarriers)
    positions = grid.all_positions()
    adps = np.zeros(
        (grid.n_points, array.n_antennas, ofdm.n_subcarriers), dtype="<f4"
    )
    for i, pos in enumerate(positions):
        paths = trace_paths(env, pos, array, ofdm)
        csi = synthesize_csi(paths, array, ofdm)
        adps[i] = adp_from_csi(csi, dft).astype("<f4")
    meta = {
        "format_version": META_FORMAT_VERSION,
        "grid": grid.to_meta(),
        "array": {
            "n_antennas": array.n_antennas,
            "wavelength": array.wavelength,
            "element_spacing": array.element_spacing,
            "carrier_frequency": array.carrier_frequency,
        },
        "ofdm": {"n_subcarriers": ofdm.n_subcarriers, "bandwidth": ofdm.bandwidth},
        "environment": format_environment(env),
        "seed": seed,
    }
    return FingerprintDb(grid=grid, positions=positions, adps=adps, meta=meta)


def neighbors_within(
    db: FingerprintDb, center, radius: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    """All (position, profile) entries within ``radius`` of ``center``.

    Sorted by distance, ties broken by row-major grid order. Zero-profile
    entries are included; callers that feed similarities filter them via
    ``db.zero_flags``.
    """
    idx = neighbor_indices_within(db, center, radius)
    return [(db.positions[i], db.adps[i]) for i in idx]


def neighbor_indices_within(db: FingerprintDb, center, radius: float) -> np.ndarray:
    if radius < 0.0:
        raise ValueError("radius must be nonnegative")
    c = np.asarray(center, dtype=float)
    dist = np.linalg.norm(db.positions - c, axis=1)
    hit = np.flatnonzero(dist <= radius)
    order = np.lexsort((hit, dist[hit]))
    return hit[order]


def save_db(db: FingerprintDb, path) -> None:
    """Persist to an ADPF container plus a '<path>.meta.json' sidecar."""
    records = container.make_records(
        container.VERSION_FINGERPRINTS, db.n_t, db.n_c, len(db.positions)
    )
    records["position"] = db.positions
    records["pixels"] = db.adps
    container.write_container(
        path, container.VERSION_FINGERPRINTS, db.n_t, db.n_c, records
    )
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(db.meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_db(path) -> FingerprintDb:
    _, n_t, n_c, records = container.read_container(
        path, expect_version=container.VERSION_FINGERPRINTS
    )
    with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    grid = GridSpec.from_meta(meta["grid"])
    return FingerprintDb(
        grid=grid,
        positions=records["position"].astype(np.float64),
        adps=records["pixels"],
        meta=meta,
    )


def environment_from_meta(meta: dict) -> Environment:
    return parse_environment(meta["environment"])


def _sidecar_path(path) -> str:
    return os.fspath(path) + ".meta.json"
