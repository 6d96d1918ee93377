"""Walks, distortion scenarios, and sequence generation."""

import math
from collections import Counter

import numpy as np
import pytest

from mimoloc.adp import build_dft_pair, similarity
from mimoloc.channel import ArrayConfig, Environment, OfdmConfig, Reflector
from mimoloc.dynamics import (
    DistortionKind,
    DistortionScenario,
    WalkMode,
    build_training_set,
    distort_paths,
    draw_foreground_path,
    generate_sequence,
    load_sequences,
    random_walk,
    save_sequences,
)
from mimoloc.errors import NotEnoughPaths
from mimoloc.fingerprint import GridSpec, build_db

from test_channel import make_path

ARRAY = ArrayConfig(n_antennas=8, wavelength=0.1)
OFDM = OfdmConfig(n_subcarriers=8, bandwidth=20e6)
ENV = Environment(
    bs_position=(0.0, 0.0),
    reflectors=(Reflector((-30.0, 8.0), (30.0, 8.0), 0.8),),
)
GRID = GridSpec(origin=(6.0, -2.0), spacing=0.5, n_rows=4, n_cols=4)


class TestRandomWalk:
    def test_same_seed_same_walk(self):
        w1 = random_walk(GRID, WalkMode.MODE2, 20, 42)
        w2 = random_walk(GRID, WalkMode.MODE2, 20, 42)
        np.testing.assert_array_equal(w1.cells, w2.cells)

    def test_stays_on_grid_and_adjacent(self):
        for seed in range(60):
            for mode in WalkMode:
                w = random_walk(GRID, mode, 25, seed)
                assert len(w.cells) == 25
                assert (w.cells[:, 0] >= 0).all() and (w.cells[:, 0] < 4).all()
                assert (w.cells[:, 1] >= 0).all() and (w.cells[:, 1] < 4).all()
                steps = np.abs(np.diff(w.cells, axis=0)).sum(axis=1)
                assert (steps == 1).all()

    def test_mode1_straight_until_boundary(self):
        grid = GridSpec(origin=(0.0, 0.0), spacing=1.0, n_rows=1, n_cols=12)
        w = random_walk(grid, WalkMode.MODE1, 6, 1)
        cols = w.cells[:, 1]
        assert all(cols[i + 1] == cols[i] + 1 for i in range(5))

    def test_mode1_heading_changes_only_at_boundary(self):
        for seed in range(40):
            w = random_walk(GRID, WalkMode.MODE1, 30, seed)
            diffs = [tuple(d) for d in np.diff(w.cells, axis=0)]
            for i in range(1, len(diffs)):
                if diffs[i] != diffs[i - 1]:
                    r, c = w.cells[i]
                    nr, nc = r + diffs[i - 1][0], c + diffs[i - 1][1]
                    assert not (0 <= nr < 4 and 0 <= nc < 4)

    def test_mode2_interior_direction_frequencies_uniform(self):
        grid = GridSpec(origin=(0.0, 0.0), spacing=1.0, n_rows=30, n_cols=30)
        w = random_walk(grid, WalkMode.MODE2, 2000, 0)
        steps = np.diff(w.cells, axis=0)
        counts = Counter(
            tuple(steps[i])
            for i in range(len(steps))
            if 0 < w.cells[i][0] < 29 and 0 < w.cells[i][1] < 29
        )
        total = sum(counts.values())
        assert len(counts) == 4
        for n in counts.values():
            assert abs(n / total - 0.25) < 0.05

    def test_positions_in_meters(self):
        w = random_walk(GRID, WalkMode.MODE1, 5, 3)
        pos = w.positions()
        np.testing.assert_allclose(
            pos[0],
            [6.0 + w.cells[0, 1] * 0.5, -2.0 + w.cells[0, 0] * 0.5],
        )

    def test_eight_neighborhood_option(self):
        w = random_walk(GRID, WalkMode.MODE2, 40, 5, neighborhood=8)
        steps = np.abs(np.diff(w.cells, axis=0)).max(axis=1)
        assert (steps == 1).all()


class TestDistortPaths:
    def make_pair(self):
        return [
            make_path(aoa=1.0, gain=1.0 + 0j, sampled_delay=1),
            make_path(aoa=2.0, gain=0.3 + 0j, sampled_delay=3),
        ]

    def test_los_blockage_removes_strongest(self):
        out = distort_paths(
            self.make_pair(), DistortionScenario(DistortionKind.LOS_BLOCKAGE)
        )
        assert len(out) == 1 and abs(out[0].gain) == pytest.approx(0.3)

    def test_nlos_blockage_removes_second(self):
        out = distort_paths(
            self.make_pair(), DistortionScenario(DistortionKind.NLOS_BLOCKAGE)
        )
        assert len(out) == 1 and abs(out[0].gain) == pytest.approx(1.0)

    def test_single_path_los_blockage_empties(self):
        out = distort_paths(
            [make_path()], DistortionScenario(DistortionKind.LOS_BLOCKAGE)
        )
        assert out == []

    def test_not_enough_paths(self):
        with pytest.raises(NotEnoughPaths):
            distort_paths([], DistortionScenario(DistortionKind.LOS_BLOCKAGE))
        with pytest.raises(NotEnoughPaths):
            distort_paths(
                [make_path()], DistortionScenario(DistortionKind.NLOS_BLOCKAGE)
            )
        with pytest.raises(NotEnoughPaths):
            distort_paths([], DistortionScenario(DistortionKind.NLOS_ADDITION), OFDM)

    def test_addition_level(self):
        scenario = DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=4)
        out = distort_paths(self.make_pair(), scenario, OFDM)
        assert len(out) == 3
        # -6 dB below the strongest gain of 1.0
        assert abs(out[-1].gain) == pytest.approx(10 ** (-6 / 20), rel=1e-12)
        assert abs(abs(out[-1].gain) - 0.5012) < 1e-3
        assert 0.0 < out[-1].aoa < math.pi
        assert 0 <= out[-1].sampled_delay < 8
        assert out[-1].cluster_id == -1

    def test_input_never_mutated(self):
        paths = self.make_pair()
        snapshot = list(paths)
        for kind in DistortionKind:
            distort_paths(paths, DistortionScenario(kind, rng_seed=1), OFDM)
            assert paths == snapshot

    def test_composition_counts(self):
        paths = [
            make_path(gain=1.0 + 0j),
            make_path(gain=0.5 + 0j, sampled_delay=2),
            make_path(gain=0.2 + 0j, sampled_delay=4),
        ]
        blocked = distort_paths(paths, DistortionScenario(DistortionKind.LOS_BLOCKAGE))
        full = distort_paths(
            blocked, DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=2), OFDM
        )
        assert len(full) == len(paths) - 1 + 1

    def test_foreground_draw_deterministic(self):
        scenario = DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=9)
        f1 = draw_foreground_path(scenario, [make_path()], OFDM)
        f2 = draw_foreground_path(scenario, [make_path()], OFDM)
        assert f1 == f2


class TestGenerateSequence:
    DFT = build_dft_pair(8, 8)

    def walk(self, seed=7, length=12):
        return random_walk(GRID, WalkMode.MODE1, length, seed)

    def test_undistorted_matches_db_bit_exact(self):
        db = build_db(ENV, GRID, ARRAY, OFDM)
        walk = self.walk()
        seq = generate_sequence(ENV, walk, None, 0, ARRAY, OFDM, dft=self.DFT)
        assert len(seq) == 12
        for frame, (r, c) in zip(seq.frames, walk.cells):
            assert not frame.distorted and not frame.lost_link
            idx = r * GRID.n_cols + c
            np.testing.assert_array_equal(frame.adp, db.adps[idx])

    def test_blockage_lowers_energy_from_distort_from(self):
        walk = self.walk()
        clean = generate_sequence(ENV, walk, None, 0, ARRAY, OFDM, dft=self.DFT)
        scenario = DistortionScenario(DistortionKind.LOS_BLOCKAGE)
        seq = generate_sequence(ENV, walk, scenario, 6, ARRAY, OFDM, dft=self.DFT)
        for i, frame in enumerate(seq.frames):
            if i < 6:
                assert not frame.distorted
                np.testing.assert_array_equal(frame.adp, clean.frames[i].adp)
            else:
                assert frame.distorted
                assert np.linalg.norm(frame.adp) < np.linalg.norm(
                    clean.frames[i].adp
                )

    def test_addition_changes_distorted_frames(self):
        walk = self.walk()
        clean = generate_sequence(ENV, walk, None, 0, ARRAY, OFDM, dft=self.DFT)
        scenario = DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=3)
        seq = generate_sequence(ENV, walk, scenario, 6, ARRAY, OFDM, dft=self.DFT)
        for i in range(6, 12):
            s = similarity(seq.frames[i].adp, clean.frames[i].adp)
            assert s < 1.0 - 1e-6

    def test_blocking_the_only_path_loses_link(self):
        free = Environment(bs_position=(0.0, 0.0))
        scenario = DistortionScenario(DistortionKind.LOS_BLOCKAGE)
        seq = generate_sequence(
            free, self.walk(), scenario, 6, ARRAY, OFDM, dft=self.DFT
        )
        for i, frame in enumerate(seq.frames):
            assert frame.lost_link == (i >= 6)
            if frame.lost_link:
                assert not np.any(frame.adp)

    def test_frozen_foreground_constant_across_frames(self):
        free = Environment(bs_position=(0.0, 0.0))
        scenario = DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=11)
        seq = generate_sequence(
            free, self.walk(), scenario, 4, ARRAY, OFDM, dft=self.DFT
        )
        bins = {self._secondary_peak(f.adp) for f in seq.frames[4:]}
        assert len(bins) == 1

    def test_refreshed_foreground_moves(self):
        free = Environment(bs_position=(0.0, 0.0))
        scenario = DistortionScenario(
            DistortionKind.NLOS_ADDITION, rng_seed=11, refresh_each_frame=True
        )
        seq = generate_sequence(
            free, self.walk(), scenario, 4, ARRAY, OFDM, dft=self.DFT
        )
        bins = {self._secondary_peak(f.adp) for f in seq.frames[4:]}
        assert len(bins) > 1

    @staticmethod
    def _secondary_peak(adp):
        masked = adp.astype(np.float64).copy()
        r, c = np.unravel_index(np.argmax(masked), masked.shape)
        masked[max(0, r - 1): r + 2, max(0, c - 1): c + 2] = 0.0
        return np.unravel_index(np.argmax(masked), masked.shape)

    def test_deterministic(self):
        scenario = DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=5)
        a = generate_sequence(ENV, self.walk(), scenario, 6, ARRAY, OFDM, dft=self.DFT)
        b = generate_sequence(ENV, self.walk(), scenario, 6, ARRAY, OFDM, dft=self.DFT)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.adp, fb.adp)

    def test_adp_level_blockage_masks_argmax_window(self):
        walk = self.walk()
        clean = generate_sequence(ENV, walk, None, 0, ARRAY, OFDM, dft=self.DFT)
        scenario = DistortionScenario(DistortionKind.LOS_BLOCKAGE)
        seq = generate_sequence(
            ENV, walk, scenario, 6, ARRAY, OFDM, dft=self.DFT,
            distortion_level="adp",
        )
        for i in range(6, 12):
            ref = clean.frames[i].adp.astype(np.float64)
            r, c = np.unravel_index(np.argmax(ref), ref.shape)
            expected = ref.copy()
            expected[max(0, r - 1): r + 2, max(0, c - 1): c + 2] = 0.0
            np.testing.assert_allclose(
                seq.frames[i].adp, expected.astype("<f4"), rtol=1e-6
            )

    def test_adp_level_addition_raises_energy(self):
        walk = self.walk()
        clean = generate_sequence(ENV, walk, None, 0, ARRAY, OFDM, dft=self.DFT)
        scenario = DistortionScenario(DistortionKind.NLOS_ADDITION, rng_seed=2)
        seq = generate_sequence(
            ENV, walk, scenario, 6, ARRAY, OFDM, dft=self.DFT,
            distortion_level="adp",
        )
        for i in range(6, 12):
            assert np.linalg.norm(seq.frames[i].adp) > np.linalg.norm(
                clean.frames[i].adp
            )


class TestTrainingSet:
    def test_shape_and_flags(self):
        seqs = build_training_set(ENV, GRID, 3, 11, ARRAY, OFDM, seed=0)
        assert len(seqs) == 3
        for seq in seqs:
            assert len(seq) == 11
            assert seq.mode is WalkMode.MODE1
            assert all(not f.distorted for f in seq.frames)

    def test_deterministic_and_streams_independent(self):
        a = build_training_set(ENV, GRID, 3, 5, ARRAY, OFDM, seed=0)
        b = build_training_set(ENV, GRID, 3, 5, ARRAY, OFDM, seed=0)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.adps(), sb.adps())
        # different sequences explore different cells with this seed
        assert not np.array_equal(a[0].positions(), a[1].positions())


class TestSequencePersistence:
    def test_round_trip(self, tmp_path):
        scenario = DistortionScenario(DistortionKind.LOS_BLOCKAGE)
        seqs = [
            generate_sequence(
                ENV, random_walk(GRID, WalkMode.MODE1, 8, s), scenario, 4,
                ARRAY, OFDM,
            )
            for s in (1, 2)
        ]
        path = tmp_path / "seqs.adpf"
        save_sequences(path, seqs)
        loaded = load_sequences(path)
        assert len(loaded) == 2
        for orig, got in zip(seqs, loaded):
            assert got.distort_from == 4
            np.testing.assert_array_equal(orig.adps(), got.adps())
            np.testing.assert_array_equal(orig.positions(), got.positions())
            assert [f.distorted for f in orig.frames] == [
                f.distorted for f in got.frames
            ]
        # second save of the loaded data is byte-identical
        path2 = tmp_path / "seqs2.adpf"
        save_sequences(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()
