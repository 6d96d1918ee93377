"""Distortion detection and location recovery over frame sequences.

Glue between the fingerprint database, a trained localizer, and a
next-frame predictor. Every measured frame is first checked for
plausibility: locate it, then ask whether the database entries around
that location actually resemble the frame. Frames that fail the check
are not trusted; their position and profile are rebuilt from a
prediction out of recent history, fused with database entries around
the previous position.

Localizers and predictors are plain callables here (profile in,
position out; history in, profile out), so the pieces can be swapped or
faked independently.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .adp import similarity
from .errors import EmptyNeighborhood, FormatError, VersionError
from .fingerprint import FingerprintDb, GridSpec, neighbor_indices_within

ESTIMATES_FORMAT = "mimoloc-estimates"
ESTIMATES_VERSION = 1


class Verdict(Enum):
    """What the detector concluded about one measured frame."""

    ACCURATE = "accurate"
    DISTORTED = "distorted"
    LOST_LINK = "lost-link"


@dataclass(frozen=True)
class Thresholds:
    """Decision radii (meters) and the similarity floor for detection.

    Attributes:
        neighborhood_radius: how far around the localized position to look
            for database entries when judging a frame.
        similarity_floor: minimum best-neighbor similarity for a frame to
            count as accurate.
        recovery_radius: how far around the previous position to gather
            fusion candidates when rebuilding a distorted frame.
    """

    neighborhood_radius: float
    similarity_floor: float
    recovery_radius: float

    def __post_init__(self):
        if self.neighborhood_radius <= 0.0 or self.recovery_radius <= 0.0:
            raise ValueError("radii must be positive")
        if not 0.0 <= self.similarity_floor <= 1.0:
            raise ValueError("similarity floor must lie in [0, 1]")


def default_thresholds(grid: GridSpec, similarity_floor: float) -> Thresholds:
    """Radii tied to the grid pitch: 3 cells for detection, 2 for recovery."""
    return Thresholds(3.0 * grid.spacing, similarity_floor, 2.0 * grid.spacing)


def calibrate_similarity_floor(db: FingerprintDb, radius: float | None = None,
                               percentile: float = 1.0) -> float:
    """Derive the detection similarity floor from the database itself.

    For every identifiable grid point, take the best similarity to any
    other identifiable point within ``radius``. A clean frame measured
    near the grid should score at least like a grid point scores against
    its own neighborhood, so the floor is a low percentile of those
    per-point maxima. The default percentile is deliberately tight to the
    bottom of that distribution: a path loss or a strong foreign path
    drops the best-neighbor similarity far below anything clean frames
    produce, while a floor set higher up starts flagging frames whose
    distortion is too mild to hurt the localizer, and rebuilding those
    replaces a good estimate with a worse one.

    Raises:
        EmptyNeighborhood: if no grid point has a neighbor in range.
    """
    if radius is None:
        radius = 3.0 * db.grid.spacing
    maxima = []
    for i in np.flatnonzero(~db.zero_flags):
        idx = neighbor_indices_within(db, db.positions[i], radius)
        idx = idx[(idx != i) & ~db.zero_flags[idx]]
        if idx.size == 0:
            continue
        maxima.append(max(similarity(db.adps[i], db.adps[j]) for j in idx))
    if not maxima:
        raise EmptyNeighborhood("no grid point has a neighbor within the radius")
    return float(np.percentile(maxima, percentile))


class DetectionResult(NamedTuple):
    verdict: Verdict
    position: np.ndarray | None
    best_similarity: float
    neighbor_count: int


def detect_distorted(adp, localizer, db: FingerprintDb,
                     thresholds: Thresholds) -> DetectionResult:
    """Judge one measured frame.

    An all-zero frame is ``LOST_LINK``. Otherwise the frame is located
    and compared against identifiable database entries within the
    detection radius of that estimate: ``ACCURATE`` when the best
    similarity reaches the floor, ``DISTORTED`` when it does not (in
    particular when there are no neighbors at all to vouch for it).
    """
    frame = np.asarray(adp, dtype=np.float64)
    if not np.any(frame):
        return DetectionResult(Verdict.LOST_LINK, None, 0.0, 0)
    position = np.asarray(localizer(adp), dtype=float)
    idx = neighbor_indices_within(db, position, thresholds.neighborhood_radius)
    idx = idx[~db.zero_flags[idx]]
    best = 0.0
    for j in idx:
        best = max(best, similarity(frame, db.adps[j]))
    verdict = (Verdict.ACCURATE if best >= thresholds.similarity_floor
               else Verdict.DISTORTED)
    return DetectionResult(verdict, position, best, int(idx.size))


class RecoveryResult(NamedTuple):
    position: np.ndarray
    adp: np.ndarray
    predicted_position: np.ndarray | None
    prediction_weight: float
    neighbor_count: int


def recover_and_locate(measured, history, prev_position, localizer,
                       db: FingerprintDb, thresholds: Thresholds, predictor,
                       include_prediction: bool = True) -> RecoveryResult:
    """Rebuild position and profile for a frame that cannot be trusted.

    The predictor extrapolates a frame from recent history. Fusion
    candidates are the identifiable database entries within the recovery
    radius of the previous position, plus the predicted frame itself
    (located with the localizer). Every candidate is weighted by its
    similarity to the measured frame, distorted as it is: the distortion
    usually leaves part of the profile intact, and that part votes for
    the right candidates. Weights are normalized to sum to one; if every
    similarity is zero the candidates are weighted uniformly. The fused
    position and profile are the weighted means.

    A measured frame with no energy carries no vote at all, so recovery
    falls back to the prediction alone: its localized position and the
    predicted profile are returned as they are.

    Raises:
        EmptyNeighborhood: no candidates (no identifiable database entry
            in range and no usable prediction), or a lost link with a
            prediction of zero energy.
    """
    frame = np.asarray(measured, dtype=np.float64)
    predicted = np.asarray(predictor(list(history)), dtype=np.float64)
    has_prediction = bool(np.any(predicted))
    predicted_position = None
    if has_prediction:
        predicted_position = np.asarray(localizer(predicted), dtype=float)
    if not np.any(frame):
        if not has_prediction:
            raise EmptyNeighborhood(
                "link lost and the prediction out of history is empty"
            )
        return RecoveryResult(predicted_position, predicted,
                              predicted_position, 1.0, 0)
    positions, adps, sims = [], [], []
    neighbor_count = 0
    if prev_position is not None:
        idx = neighbor_indices_within(db, prev_position,
                                      thresholds.recovery_radius)
        idx = idx[~db.zero_flags[idx]]
        neighbor_count = int(idx.size)
        for j in idx:
            positions.append(np.asarray(db.positions[j], dtype=float))
            adps.append(np.asarray(db.adps[j], dtype=np.float64))
            sims.append(similarity(frame, db.adps[j]))
    if has_prediction and include_prediction:
        positions.append(predicted_position)
        adps.append(predicted)
        sims.append(similarity(frame, predicted))
    if not positions:
        raise EmptyNeighborhood(
            "no database entries near the previous position and no usable "
            "prediction"
        )
    weights = np.asarray(sims, dtype=np.float64)
    total = float(weights.sum())
    if total > 0.0:
        weights /= total
    else:
        weights = np.full(len(sims), 1.0 / len(sims))
    position = np.einsum("i,ij->j", weights, np.stack(positions))
    fused = np.einsum("i,ijk->jk", weights, np.stack(adps))
    prediction_weight = (
        float(weights[-1]) if include_prediction and has_prediction else 0.0
    )
    return RecoveryResult(position, fused, predicted_position,
                          prediction_weight, neighbor_count)


class FrameEstimate(NamedTuple):
    frame_index: int
    verdict: Verdict
    position: np.ndarray
    best_similarity: float
    source: str
    predicted_position: np.ndarray | None
    prediction_weight: float


def run_sequence(adps, localizer, db: FingerprintDb, thresholds: Thresholds,
                 predictor, history_length: int = 4,
                 include_prediction: bool = True) -> list[FrameEstimate]:
    """Estimate a position for every frame of one sequence.

    Accurate frames feed the rolling history as measured; distorted and
    lost-link frames are recovered and feed it as rebuilt. ``source``
    records which happened: "measured", "recovered", or "fallback" for a
    distorted very first frame, where there is no history to predict
    from and the untrusted estimate is kept as the best available.

    The predictor runs on every frame that has a history, accepted or
    not, and its localized output is recorded as ``predicted_position``.
    That keeps the predictive arm observable as a method of its own even
    on frames the detector waves through.

    Raises:
        EmptyNeighborhood: if the link is lost on the very first frame.
    """
    history = deque(maxlen=history_length)
    prev_position = None
    estimates = []
    for t, adp in enumerate(adps):
        det = detect_distorted(adp, localizer, db, thresholds)
        predicted = predictor(list(history)) if history else None
        predicted_position = None
        if predicted is not None and np.any(predicted):
            predicted_position = localizer(predicted)
        if det.verdict is Verdict.ACCURATE:
            position = det.position
            history.append(np.asarray(adp, dtype=np.float64))
            estimates.append(FrameEstimate(
                t, det.verdict, position, det.best_similarity, "measured",
                predicted_position, 0.0))
        elif not history:
            if det.verdict is Verdict.LOST_LINK:
                raise EmptyNeighborhood(
                    f"frame {t}: link lost before any usable frame"
                )
            position = det.position
            history.append(np.asarray(adp, dtype=np.float64))
            estimates.append(FrameEstimate(
                t, det.verdict, position, det.best_similarity, "fallback",
                predicted_position, 0.0))
        else:
            rec = recover_and_locate(adp, history, prev_position, localizer,
                                     db, thresholds,
                                     lambda _history: predicted,
                                     include_prediction)
            position = rec.position
            history.append(rec.adp)
            estimates.append(FrameEstimate(
                t, det.verdict, position, det.best_similarity, "recovered",
                rec.predicted_position, rec.prediction_weight))
        prev_position = position
    return estimates


# --- estimate stream ---------------------------------------------------------

def save_estimates(path, estimates) -> None:
    """Write estimates as JSON lines under a versioned header line."""
    header = {"format": ESTIMATES_FORMAT, "format_version": ESTIMATES_VERSION}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in estimates:
            row = {
                "frame_index": e.frame_index,
                "verdict": e.verdict.value,
                "position": [float(e.position[0]), float(e.position[1])],
                "best_similarity": e.best_similarity,
                "source": e.source,
                "predicted_position": (
                    None if e.predicted_position is None
                    else [float(e.predicted_position[0]),
                          float(e.predicted_position[1])]
                ),
                "prediction_weight": e.prediction_weight,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_estimates(path) -> list[FrameEstimate]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line]
    if not lines:
        raise FormatError("empty estimate file")
    header = json.loads(lines[0])
    if header.get("format") != ESTIMATES_FORMAT:
        raise FormatError(f"unexpected header {header!r}")
    if header.get("format_version") != ESTIMATES_VERSION:
        raise VersionError(
            f"unsupported estimate version {header.get('format_version')!r}"
        )
    estimates = []
    for line in lines[1:]:
        row = json.loads(line)
        predicted = row["predicted_position"]
        estimates.append(FrameEstimate(
            int(row["frame_index"]),
            Verdict(row["verdict"]),
            np.asarray(row["position"], dtype=float),
            float(row["best_similarity"]),
            str(row["source"]),
            None if predicted is None else np.asarray(predicted, dtype=float),
            float(row["prediction_weight"]),
        ))
    return estimates
