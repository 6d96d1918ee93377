"""Detection verdicts, recovery fusion, and whole-sequence runs."""

import numpy as np
import pytest

from mimoloc.adp import adp_from_csi, build_dft_pair, similarity
from mimoloc.channel import (
    ArrayConfig,
    Environment,
    OfdmConfig,
    Reflector,
    synthesize_csi,
    trace_paths,
)
from mimoloc.dynamics import (
    DistortionKind,
    DistortionScenario,
    WalkMode,
    distort_paths,
    generate_sequence,
    random_walk,
)
from mimoloc.errors import EmptyNeighborhood, FormatError, VersionError
from mimoloc.fingerprint import FingerprintDb, GridSpec, build_db
from mimoloc.pipeline import (
    Thresholds,
    Verdict,
    calibrate_similarity_floor,
    default_thresholds,
    detect_distorted,
    load_estimates,
    recover_and_locate,
    run_sequence,
    save_estimates,
)
from mimoloc.predictor import PeakTrackingPredictor

ARRAY = ArrayConfig(n_antennas=16, wavelength=0.1)
OFDM = OfdmConfig(n_subcarriers=16, bandwidth=50e6)
DFT = build_dft_pair(16, 16)
ENV = Environment(
    bs_position=(0.0, 0.0),
    reflectors=(
        Reflector((2.0, 4.0), (12.0, 4.0), 0.9),
        Reflector((12.0, -6.0), (12.0, 6.0), 0.85),
    ),
)
GRID = GridSpec(origin=(6.0, -2.0), spacing=0.25, n_rows=16, n_cols=16)


@pytest.fixture(scope="module")
def db():
    return build_db(ENV, GRID, ARRAY, OFDM, seed=0)


@pytest.fixture(scope="module")
def thresholds(db):
    return default_thresholds(GRID, calibrate_similarity_floor(db))


def nn_localizer(db):
    """Closest database entry by profile similarity; exact on clean frames."""

    def localize(adp):
        sims = np.array(
            [similarity(adp, a) if np.any(a) else -1.0 for a in db.adps]
        )
        return db.positions[int(np.argmax(sims))]

    return localize


def frame_at(position, scenario=None):
    paths = trace_paths(ENV, np.asarray(position, float), ARRAY, OFDM)
    if scenario is not None:
        paths = distort_paths(paths, scenario, OFDM)
    return adp_from_csi(synthesize_csi(paths, ARRAY, OFDM), DFT)


class TestThresholds:
    def test_default_radii_follow_grid_pitch(self):
        thr = default_thresholds(GRID, 0.9)
        assert thr.neighborhood_radius == pytest.approx(0.75)
        assert thr.recovery_radius == pytest.approx(0.5)
        assert thr.similarity_floor == 0.9

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            Thresholds(-1.0, 0.5, 1.0)
        with pytest.raises(ValueError):
            Thresholds(1.0, 0.5, 0.0)
        with pytest.raises(ValueError):
            Thresholds(1.0, 1.5, 1.0)


class TestCalibration:
    def test_floor_is_high_on_a_dense_grid(self, db):
        floor = calibrate_similarity_floor(db)
        assert 0.9 < floor < 1.0

    def test_percentile_is_monotone(self, db):
        assert calibrate_similarity_floor(db, percentile=5.0) <= \
            calibrate_similarity_floor(db, percentile=50.0)

    def test_identical_profiles_calibrate_to_one(self):
        tiny = GridSpec(origin=(0.0, 0.0), spacing=1.0, n_rows=2, n_cols=2)
        adp = np.zeros((4, 4, 4), dtype=np.float32)
        adp[:, 1, 2] = 1.0
        copies = FingerprintDb(tiny, tiny.all_positions(), adp)
        assert calibrate_similarity_floor(copies) == pytest.approx(1.0)

    def test_no_neighbors_in_range_raises(self, db):
        with pytest.raises(EmptyNeighborhood):
            calibrate_similarity_floor(db, radius=0.1 * GRID.spacing)


class TestDetection:
    def test_zero_frame_is_lost_link(self, db, thresholds):
        det = detect_distorted(np.zeros((16, 16)), nn_localizer(db), db,
                               thresholds)
        assert det.verdict is Verdict.LOST_LINK
        assert det.position is None
        assert det.neighbor_count == 0

    def test_clean_frame_is_accurate(self, db, thresholds):
        point = GRID.position(7, 9)
        det = detect_distorted(frame_at(point), nn_localizer(db), db, thresholds)
        assert det.verdict is Verdict.ACCURATE
        assert det.best_similarity > 0.999
        assert np.allclose(det.position, point)
        assert det.neighbor_count > 0

    @pytest.mark.parametrize("kind", list(DistortionKind))
    def test_distorted_frame_is_flagged(self, db, thresholds, kind):
        point = GRID.position(7, 9)
        scen = DistortionScenario(kind=kind, addition_level_db=-1.0,
                                  rng_seed=3)
        det = detect_distorted(frame_at(point, scen), nn_localizer(db), db,
                               thresholds)
        assert det.verdict is Verdict.DISTORTED

    def test_faint_addition_is_waved_through(self, db, thresholds):
        point = GRID.position(7, 9)
        scen = DistortionScenario(kind=DistortionKind.NLOS_ADDITION,
                                  addition_level_db=-30.0, rng_seed=3)
        det = detect_distorted(frame_at(point, scen), nn_localizer(db), db,
                               thresholds)
        assert det.verdict is Verdict.ACCURATE

    def test_verdict_survives_frame_scaling(self, db, thresholds):
        loc = nn_localizer(db)
        clean = frame_at(GRID.position(3, 3))
        blocked = frame_at(
            GRID.position(3, 3),
            DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE),
        )
        for frame in (clean, blocked):
            base = detect_distorted(frame, loc, db, thresholds)
            scaled = detect_distorted(3.0 * frame, loc, db, thresholds)
            assert scaled.verdict is base.verdict
            assert scaled.best_similarity == pytest.approx(base.best_similarity)

    def test_no_neighbors_means_distorted(self, db, thresholds):
        far = lambda adp: np.array([1000.0, 1000.0])
        det = detect_distorted(frame_at(GRID.position(2, 2)), far, db,
                               thresholds)
        assert det.verdict is Verdict.DISTORTED
        assert det.neighbor_count == 0
        assert det.best_similarity == 0.0


class TestRecovery:
    def test_two_candidate_midpoint(self, db, thresholds):
        # shrink the recovery radius so exactly one database entry competes
        # with the prediction, both with similarity one: a clean midpoint
        point_index = 5 * GRID.n_cols + 5
        point = db.positions[point_index]
        entry = np.asarray(db.adps[point_index], dtype=np.float64)
        elsewhere = np.array([7.5, 0.5])
        thr = Thresholds(thresholds.neighborhood_radius,
                         thresholds.similarity_floor, 0.1 * GRID.spacing)
        rec = recover_and_locate(
            entry, [entry], point, lambda adp: elsewhere, db, thr,
            lambda history: entry)
        assert rec.neighbor_count == 1
        assert np.allclose(rec.position, (point + elsewhere) / 2.0, atol=1e-9)
        assert np.allclose(rec.adp, entry, atol=1e-9)
        assert rec.prediction_weight == pytest.approx(0.5, abs=1e-9)
        assert np.allclose(rec.predicted_position, elsewhere)

    def test_unrelated_frame_weights_neighbors_uniformly(self):
        # one-hot database profiles and a measured frame on a pixel no
        # candidate uses: every similarity is zero, so the weights fall
        # back to uniform and the fused position is the cross centroid
        tiny = GridSpec(origin=(0.0, 0.0), spacing=1.0, n_rows=3, n_cols=3)
        adps = np.zeros((9, 4, 4), dtype="<f4")
        for i in range(9):
            adps[i, i // 4, i % 4] = 1.0
        tiny_db = FingerprintDb(grid=tiny, positions=tiny.all_positions(),
                                adps=adps)
        measured = np.zeros((4, 4))
        measured[3, 3] = 1.0
        thr = Thresholds(1.0, 0.5, 1.0)
        rec = recover_and_locate(
            measured, [measured], tiny.position(1, 1), nn_localizer(tiny_db),
            tiny_db, thr, lambda history: np.zeros((4, 4)))
        assert rec.neighbor_count == 5
        assert np.allclose(rec.position, tiny.position(1, 1), atol=1e-12)
        assert rec.predicted_position is None
        assert rec.prediction_weight == 0.0

    def test_lost_link_falls_back_to_prediction(self, db, thresholds):
        point_index = 5 * GRID.n_cols + 5
        point = db.positions[point_index]
        entry = np.asarray(db.adps[point_index], dtype=np.float64)
        rec = recover_and_locate(
            np.zeros((16, 16)), [entry], point, nn_localizer(db), db,
            thresholds, lambda history: entry)
        assert np.allclose(rec.position, point, atol=1e-12)
        assert np.allclose(rec.adp, entry, atol=1e-12)
        assert rec.prediction_weight == 1.0
        assert rec.neighbor_count == 0

    def test_nothing_to_fuse_raises(self, db, thresholds):
        zero = np.zeros((16, 16))
        with pytest.raises(EmptyNeighborhood):
            recover_and_locate(zero, [zero], None, nn_localizer(db),
                               db, thresholds, lambda history: zero)
        with pytest.raises(EmptyNeighborhood):
            recover_and_locate(frame_at(GRID.position(4, 4)), [zero], None,
                               nn_localizer(db), db, thresholds,
                               lambda history: zero)

    def test_prediction_can_be_excluded(self, db, thresholds):
        point_index = 5 * GRID.n_cols + 5
        point = db.positions[point_index]
        entry = np.asarray(db.adps[point_index], dtype=np.float64)
        thr = Thresholds(thresholds.neighborhood_radius,
                         thresholds.similarity_floor, 0.1 * GRID.spacing)
        rec = recover_and_locate(
            entry, [entry], point, nn_localizer(db), db, thr,
            lambda history: entry, include_prediction=False)
        assert np.allclose(rec.position, point, atol=1e-12)
        assert rec.prediction_weight == 0.0
        # diagnostics still report where the prediction alone would land
        assert rec.predicted_position is not None

    def test_fused_position_stays_in_candidate_hull(self, db, thresholds):
        rng = np.random.default_rng(9)
        tracker = PeakTrackingPredictor()
        for _ in range(10):
            row, col = rng.integers(2, 14, size=2)
            point = GRID.position(int(row), int(col))
            history = [frame_at(point)] * 3
            measured = frame_at(
                point, DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE))
            rec = recover_and_locate(measured, history, point,
                                     nn_localizer(db), db, thresholds,
                                     tracker)
            lo = point - thresholds.recovery_radius - 1e-9
            hi = point + thresholds.recovery_radius + 1e-9
            assert np.all(rec.position >= lo) and np.all(rec.position <= hi)
            assert 0.0 <= rec.prediction_weight <= 1.0


def walk_sequence(scenario, distort_from, seed, length=12):
    walk = random_walk(GRID, WalkMode.MODE2, length, seed)
    return generate_sequence(ENV, walk, scenario, distort_from, ARRAY, OFDM)


class TestRunSequence:
    def test_clean_sequence_tracks_exactly(self, db, thresholds):
        seq = walk_sequence(None, 0, [200, 0])
        est = run_sequence(seq.adps(), nn_localizer(db), db, thresholds,
                           PeakTrackingPredictor())
        assert all(e.verdict is Verdict.ACCURATE for e in est)
        assert all(e.source == "measured" for e in est)
        assert np.allclose(np.stack([e.position for e in est]),
                           seq.positions())

    def test_blocked_tail_is_recovered(self, db, thresholds):
        scen = DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE, rng_seed=5)
        seq = walk_sequence(scen, 5, [200, 0])
        est = run_sequence(seq.adps(), nn_localizer(db), db, thresholds,
                           PeakTrackingPredictor())
        truth = seq.positions()
        for e, p in zip(est[:5], truth[:5]):
            assert e.source == "measured"
            assert np.allclose(e.position, p)
        for e, p in zip(est[5:], truth[5:]):
            assert e.source == "recovered"
            assert e.verdict is Verdict.DISTORTED
            assert np.linalg.norm(e.position - p) < 1.5
            assert e.predicted_position is not None

    def test_deterministic(self, db, thresholds):
        scen = DistortionScenario(kind=DistortionKind.NLOS_ADDITION, rng_seed=2)
        seq = walk_sequence(scen, 4, [200, 2])
        runs = [
            run_sequence(seq.adps(), nn_localizer(db), db, thresholds,
                         PeakTrackingPredictor())
            for _ in range(2)
        ]
        for a, b in zip(*runs):
            assert np.array_equal(a.position, b.position)
            assert a.best_similarity == b.best_similarity
            assert a.prediction_weight == b.prediction_weight

    def test_distorted_first_frame_falls_back(self, db, thresholds):
        scen = DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE, rng_seed=1)
        seq = walk_sequence(scen, 0, [200, 3])
        est = run_sequence(seq.adps(), nn_localizer(db), db, thresholds,
                           PeakTrackingPredictor())
        assert est[0].source == "fallback"
        assert est[0].verdict is Verdict.DISTORTED
        assert all(e.source == "recovered" for e in est[1:])

    def test_lost_link_first_frame_raises(self, thresholds):
        free = Environment(bs_position=(0.0, 0.0))
        tiny = GridSpec(origin=(6.0, -2.0), spacing=0.25, n_rows=2, n_cols=2)
        free_db = build_db(free, tiny, ARRAY, OFDM, seed=0)
        walk = random_walk(tiny, WalkMode.MODE2, 6, 0)
        scen = DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE)
        seq = generate_sequence(free, walk, scen, 0, ARRAY, OFDM)
        thr = default_thresholds(tiny, calibrate_similarity_floor(free_db))
        with pytest.raises(EmptyNeighborhood):
            run_sequence(seq.adps(), nn_localizer(free_db), free_db, thr,
                         PeakTrackingPredictor())

    def test_lost_link_mid_sequence_is_recovered(self, thresholds):
        free = Environment(bs_position=(0.0, 0.0))
        tiny = GridSpec(origin=(6.0, -2.0), spacing=0.25, n_rows=3, n_cols=3)
        free_db = build_db(free, tiny, ARRAY, OFDM, seed=0)
        walk = random_walk(tiny, WalkMode.MODE2, 8, 1)
        scen = DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE)
        seq = generate_sequence(free, walk, scen, 4, ARRAY, OFDM)
        assert any(fr.lost_link for fr in seq.frames[4:])
        thr = default_thresholds(tiny, calibrate_similarity_floor(free_db))
        est = run_sequence(seq.adps(), nn_localizer(free_db), free_db, thr,
                           PeakTrackingPredictor())
        for e in est[4:]:
            assert e.verdict is Verdict.LOST_LINK
            assert e.source == "recovered"
            assert np.all(np.isfinite(e.position))

    def test_prediction_exclusion_zeroes_weight(self, db, thresholds):
        scen = DistortionScenario(kind=DistortionKind.LOS_BLOCKAGE, rng_seed=5)
        seq = walk_sequence(scen, 5, [200, 4])
        est = run_sequence(seq.adps(), nn_localizer(db), db, thresholds,
                           PeakTrackingPredictor(), include_prediction=False)
        assert all(e.prediction_weight == 0.0 for e in est if
                   e.source == "recovered")


class TestEstimateStream:
    def test_round_trip(self, db, thresholds, tmp_path):
        scen = DistortionScenario(kind=DistortionKind.NLOS_BLOCKAGE, rng_seed=7)
        seq = walk_sequence(scen, 5, [200, 5])
        est = run_sequence(seq.adps(), nn_localizer(db), db, thresholds,
                           PeakTrackingPredictor())
        path = tmp_path / "estimates.jsonl"
        save_estimates(path, est)
        loaded = load_estimates(path)
        assert len(loaded) == len(est)
        for a, b in zip(est, loaded):
            assert a.frame_index == b.frame_index
            assert a.verdict is b.verdict
            assert np.array_equal(a.position, b.position)
            assert a.best_similarity == b.best_similarity
            assert a.source == b.source
            if a.predicted_position is None:
                assert b.predicted_position is None
            else:
                assert np.array_equal(a.predicted_position,
                                      b.predicted_position)
            assert a.prediction_weight == b.prediction_weight

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "estimates.jsonl"
        path.write_text('{"format": "something-else", "format_version": 1}\n')
        with pytest.raises(FormatError):
            load_estimates(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "estimates.jsonl"
        path.write_text(
            '{"format": "mimoloc-estimates", "format_version": 99}\n'
        )
        with pytest.raises(VersionError):
            load_estimates(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "estimates.jsonl"
        path.write_text("")
        with pytest.raises(FormatError):
            load_estimates(path)
