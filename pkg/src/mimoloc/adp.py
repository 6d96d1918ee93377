"""Angle-delay profile transform and similarity.

A CSI matrix H maps to the nonnegative image A = |V^H H F| where V and F
are scaled DFT bases over the antenna and subcarrier axes. V carries a
half-aperture index offset so broadside arrivals land in the middle angle
row; F uses a positive exponent so a path with sampled delay n peaks in
column n. Both factors are unitary, hence the transform preserves
Frobenius energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ZeroAdp


@dataclass(frozen=True)
class DftPair:
    """Precomputed transform factors for one (n_antennas, n_subcarriers)."""

    v: np.ndarray
    f: np.ndarray

    @property
    def n_antennas(self) -> int:
        return self.v.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.f.shape[0]


def build_dft_pair(n_antennas: int, n_subcarriers: int) -> DftPair:
    """Build the unitary angle / delay DFT factors.

    V[z, q] = exp(-2j*pi*z*(q - n_antennas/2)/n_antennas) / sqrt(n_antennas)
    F[z, q] = exp(+2j*pi*z*q/n_subcarriers) / sqrt(n_subcarriers)
    """
    if n_antennas < 1 or n_subcarriers < 1:
        raise ValueError("dimensions must be >= 1")
    z_t = np.arange(n_antennas)[:, None]
    q_t = np.arange(n_antennas)[None, :]
    v = np.exp(-2j * np.pi * z_t * (q_t - n_antennas / 2.0) / n_antennas)
    v /= np.sqrt(n_antennas)
    z_c = np.arange(n_subcarriers)[:, None]
    q_c = np.arange(n_subcarriers)[None, :]
    f = np.exp(2j * np.pi * z_c * q_c / n_subcarriers) / np.sqrt(n_subcarriers)
    return DftPair(v=v, f=f)


def adp_from_csi(csi: np.ndarray, dft: DftPair) -> np.ndarray:
    """Angle-delay profile |V^H @ csi @ F| as a float64 image.

    Rows index angle bins, columns index delay bins. Unitarity of both
    factors makes the Frobenius norm of the output equal that of the input.

    Raises:
        DimensionMismatch: if csi shape disagrees with the transform pair.
    """
    expected = (dft.n_antennas, dft.n_subcarriers)
    if csi.shape != expected:
        raise DimensionMismatch(f"csi shape {csi.shape}, expected {expected}")
    return np.abs(dft.v.conj().T @ csi @ dft.f)


def angle_bin_of_aoa(aoa: float, n_antennas: int, element_spacing: float,
                     wavelength: float) -> int:
    """Nearest angle row for an arrival angle, matching the V convention.

    The continuous bin coordinate is n_antennas*(1/2 + d*cos(aoa)/wavelength);
    broadside therefore maps to row n_antennas/2.
    """
    u = n_antennas * (0.5 + element_spacing * np.cos(aoa) / wavelength)
    return int(round(u)) % n_antennas


def gaussian_profile(
    shape: tuple[int, int],
    centers: np.ndarray,
    amplitudes: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """Sum of isotropic Gaussian bumps on a cyclic angle-delay canvas.

    Both axes are DFT bins, so distances wrap: a bump near an edge spills
    onto the opposite edge. ``centers`` is (k, 2) in (row, col) bin
    coordinates, subpixel allowed.

    Returns:
        float64 image of the given shape.
    """
    n_t, n_c = shape
    out = np.zeros(shape, dtype=np.float64)
    if len(centers) == 0:
        return out
    rows = np.arange(n_t)[:, None]
    cols = np.arange(n_c)[None, :]
    for (cz, cq), amp in zip(np.atleast_2d(centers), np.ravel(amplitudes)):
        dz = (rows - cz + n_t / 2.0) % n_t - n_t / 2.0
        dq = (cols - cq + n_c / 2.0) % n_c - n_c / 2.0
        out += amp * np.exp(-(dz * dz + dq * dq) / (2.0 * sigma * sigma))
    return out


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized correlation between two angle-delay profiles.

    Defined as <vec(a), vec(b)> / (||a||_F * ||b||_F), which lands in
    [0, 1] for nonnegative images; the result is clipped to that interval
    to shed floating-point spill.

    Raises:
        ZeroAdp: if either profile has zero Frobenius norm (the lost-link
            signal upstream).
        DimensionMismatch: on shape disagreement.
    """
    if a.shape != b.shape:
        raise DimensionMismatch(f"profile shapes {a.shape} vs {b.shape}")
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise ZeroAdp("similarity against an all-zero profile")
    return float(np.clip(np.dot(av, bv) / (na * nb), 0.0, 1.0))
