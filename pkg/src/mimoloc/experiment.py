"""End-to-end evaluation harness over simulated walks.

One experiment run builds a fingerprint database for a chosen
environment, trains both localizer heads on it, calibrates detection
thresholds, simulates a batch of random walks with a distortion
scenario, and scores four estimation methods frame by frame:

* ``dynamic``: detection plus prediction-fused recovery (the full
  pipeline).
* ``regressor``: the plain regression localizer applied to every frame
  as measured.
* ``classifier-wknn``: the classification localizer with in-cell
  k-nearest refinement, applied to every frame as measured.
* ``predictor-only``: the position of the profile predicted from the
  rolling history, without database fusion, on every frame that has a
  history; the first frame is identical to ``dynamic``.

Reports are written as flat CSV/text files whose bodies depend only on
the configuration, so a rerun is byte-identical; wall-clock figures go
to a separate JSON report.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .adp import build_dft_pair
from .channel import ArrayConfig, Environment, OfdmConfig, Reflector, load_environment
from .dynamics import (
    DistortionKind,
    DistortionScenario,
    WalkMode,
    generate_sequence,
    random_walk,
)
from .errors import ConfigError, DimensionMismatch
from .fingerprint import FingerprintDb, GridSpec, build_db
from .neural import (
    ClassifierGrid,
    ClassifierWknnLocalizer,
    Head,
    RegressionLocalizer,
    TrainConfig,
    build_model,
    default_localizer_spec,
    train,
)
from .pipeline import (
    Thresholds,
    Verdict,
    calibrate_similarity_floor,
    default_thresholds,
    run_sequence,
)
from .predictor import (
    ConvRecurrentPredictor,
    PeakTrackingPredictor,
    PredictorTrainConfig,
    train_predictor,
)

METHODS = ("dynamic", "regressor", "classifier-wknn", "predictor-only")
SCENARIOS = ("los-block", "nlos-block", "nlos-add", "none")
LOCALIZERS = ("regressor", "classifier-wknn")
PREDICTORS = ("peak-track", "conv-recurrent")


def sparse_environment() -> Environment:
    """Line of sight plus one wall: two paths everywhere on the grid.

    With so few paths, blocking or spoofing a single one destroys a large
    share of the angular information, which is what makes this the hard
    setting for static localizers.
    """
    return Environment(
        bs_position=(0.0, 0.0),
        reflectors=(Reflector((0.0, 6.0), (17.0, 6.0), 0.9),),
    )


def rich_environment() -> Environment:
    """A ring of walls around the grid: eight or more paths per point."""
    return Environment(
        bs_position=(0.0, 0.0),
        reflectors=(
            Reflector((0.0, 6.0), (17.0, 6.0), 0.9),
            Reflector((17.0, -7.0), (17.0, 6.0), 0.85),
            Reflector((-1.0, -7.0), (17.0, -7.0), 0.8),
            Reflector((-2.0, -8.0), (-2.0, 8.0), 0.85),
            Reflector((0.0, 8.0), (18.0, 8.0), 0.7),
            Reflector((19.0, -9.0), (19.0, 8.0), 0.7),
            Reflector((-1.0, -9.0), (19.0, -9.0), 0.65),
            Reflector((-4.0, -10.0), (-4.0, 10.0), 0.6),
        ),
    )


_NAMED_ENVIRONMENTS = {
    "sparse": sparse_environment,
    "rich": rich_environment,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; round-trips through JSON.

    ``environment`` is "sparse", "rich", or a path to an environment
    text file.
    """

    environment: str = "sparse"
    n_antennas: int = 16
    n_subcarriers: int = 16
    wavelength: float = 0.1
    bandwidth: float = 125e6
    grid_origin: tuple = (6.0, -5.0)
    grid_spacing: float = 0.25
    grid_rows: int = 40
    grid_cols: int = 40
    n_sequences: int = 200
    sequence_length: int = 20
    distort_from: int = 10
    scenario: str = "los-block"
    addition_level_db: float = -6.0
    localizer: str = "regressor"
    predictor: str = "peak-track"
    classifier_cells: int = 4
    wknn_k: int = 3
    history_length: int = 4
    train_epochs: int = 300
    train_learning_rate: float = 0.1
    predictor_epochs: int = 40
    predictor_train_walks: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.localizer not in LOCALIZERS:
            raise ConfigError(f"localizer must be one of {LOCALIZERS}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}")
        if (self.environment not in _NAMED_ENVIRONMENTS
                and not os.path.exists(self.environment)):
            raise ConfigError(
                f"environment {self.environment!r} is neither a preset "
                f"({sorted(_NAMED_ENVIRONMENTS)}) nor a file"
            )
        for name in ("n_antennas", "n_subcarriers", "grid_rows", "grid_cols",
                     "n_sequences", "sequence_length", "classifier_cells",
                     "wknn_k", "history_length", "train_epochs",
                     "predictor_epochs", "predictor_train_walks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("wavelength", "bandwidth", "grid_spacing",
                     "train_learning_rate"):
            if float(getattr(self, name)) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.distort_from:
            raise ConfigError("distort_from must be nonnegative")
        if len(self.grid_origin) != 2:
            raise ConfigError("grid_origin needs exactly two coordinates")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid_origin"] = list(self.grid_origin)
        return d


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "grid_origin" in data:
        data = dict(data)
        data["grid_origin"] = tuple(float(v) for v in data["grid_origin"])
    try:
        config = ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    config.validate()
    return config


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def environment_for(config: ExperimentConfig) -> Environment:
    builder = _NAMED_ENVIRONMENTS.get(config.environment)
    if builder is not None:
        return builder()
    return load_environment(config.environment)


@dataclass
class ExperimentResult:
    """Everything produced by one run, kept for scoring and reporting."""

    config: ExperimentConfig
    db: FingerprintDb
    thresholds: Thresholds
    localizers: dict
    predictor: object
    modes: list
    truths: np.ndarray
    errors: dict
    flagged: np.ndarray
    distorted: np.ndarray
    train_losses: dict
    runtime_seconds: float

    def rmse(self, method: str) -> np.ndarray:
        return rmse_per_frame(self.errors[method])

    def rmse_by_mode(self, method: str, mode: WalkMode) -> np.ndarray:
        rows = [i for i, m in enumerate(self.modes) if m is mode]
        return rmse_per_frame(self.errors[method][rows])

    def distorted_errors(self, method: str) -> np.ndarray:
        """Errors on the frames past the distortion onset, flattened."""
        return self.errors[method][:, self.config.distort_from:].ravel()

    def median_distorted_rmse(self, method: str) -> float:
        """Median over the distorted frames of the per-frame RMSE."""
        return float(np.median(self.rmse(method)[self.config.distort_from:]))

    def detection_counts(self) -> tuple:
        truth = self.distorted.astype(bool)
        flagged = self.flagged.astype(bool)
        tp = int(np.sum(truth & flagged))
        fp = int(np.sum(~truth & flagged))
        fn = int(np.sum(truth & ~flagged))
        tn = int(np.sum(~truth & ~flagged))
        return tp, fp, fn, tn

    def precision_recall(self) -> tuple:
        tp, fp, fn, _ = self.detection_counts()
        precision = tp / (tp + fp) if tp + fp else float("nan")
        recall = tp / (tp + fn) if tp + fn else float("nan")
        return precision, recall


def rmse_per_frame(errors) -> np.ndarray:
    """Column-wise RMSE of an (n_sequences, n_frames) error matrix."""
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 2:
        raise DimensionMismatch(f"expected a 2D error matrix, got {e.shape}")
    return np.sqrt(np.mean(e * e, axis=0))


def _baseline_track(localizer, adps, fallback):
    # lost-link frames give a localizer nothing to work with; the baseline
    # holds its previous estimate (or the grid center before any fix)
    positions = []
    last = None
    for adp in adps:
        if np.any(adp):
            last = np.asarray(localizer(adp), dtype=float)
        elif last is None:
            last = np.asarray(fallback, dtype=float)
        positions.append(last)
    return np.stack(positions)


def _predictor_only_track(estimates):
    """Positions of the predictive arm alone, without database fusion.

    Wherever a frame has a localized prediction out of its history, that
    is the method's answer; the first frame has no history and keeps the
    pipeline estimate.
    """
    positions = []
    for e in estimates:
        if e.predicted_position is not None:
            positions.append(np.asarray(e.predicted_position, dtype=float))
        else:
            positions.append(np.asarray(e.position, dtype=float))
    return np.stack(positions)


def run_experiment(config: ExperimentConfig, out_dir=None,
                   log=None) -> ExperimentResult:
    """Run one full evaluation; optionally write reports to ``out_dir``.

    Sequences are regenerated from the seed on every run (never read from
    disk), so per-frame ground truth and walk modes are always available.
    The first half of the sequences walks with a persistent heading
    (mode 1), the second half redraws the direction every step (mode 2).
    """
    config.validate()
    say = log if log is not None else (lambda msg: None)
    t0 = time.perf_counter()
    array = ArrayConfig(config.n_antennas, config.wavelength)
    ofdm = OfdmConfig(config.n_subcarriers, config.bandwidth)
    env = environment_for(config)
    grid = GridSpec(origin=tuple(config.grid_origin),
                    spacing=config.grid_spacing,
                    n_rows=config.grid_rows, n_cols=config.grid_cols)
    dft = build_dft_pair(config.n_antennas, config.n_subcarriers)

    say("building fingerprint database")
    db = build_db(env, grid, array, ofdm, dft, seed=config.seed)

    say("training regression localizer")
    reg_head = Head("regression")
    reg_model = build_model(
        default_localizer_spec(db.n_t, db.n_c, reg_head),
        (1, db.n_t, db.n_c), reg_head, seed=config.seed,
        normalize_input=True)
    reg_losses = train(reg_model, db,
                       TrainConfig(epochs=config.train_epochs,
                                   learning_rate=config.train_learning_rate,
                                   seed=config.seed))
    regressor = RegressionLocalizer(reg_model)

    say("training classification localizer")
    cls_head = Head("classification",
                    ClassifierGrid(config.classifier_cells,
                                   config.classifier_cells))
    cls_model = build_model(
        default_localizer_spec(db.n_t, db.n_c, cls_head),
        (1, db.n_t, db.n_c), cls_head, seed=config.seed + 1,
        normalize_input=True)
    cls_losses = train(cls_model, db,
                       TrainConfig(epochs=config.train_epochs,
                                   learning_rate=config.train_learning_rate,
                                   seed=config.seed + 1))
    classifier = ClassifierWknnLocalizer(cls_model, db, k=config.wknn_k)

    thresholds = default_thresholds(grid, calibrate_similarity_floor(db))
    say(f"similarity floor {thresholds.similarity_floor:.4f}")

    predictor_losses = []
    if config.predictor == "peak-track":
        predictor = PeakTrackingPredictor()
    else:
        say("training recurrent predictor")
        clean = []
        for i in range(config.predictor_train_walks):
            mode = WalkMode.MODE1 if i % 2 == 0 else WalkMode.MODE2
            walk = random_walk(grid, mode, config.sequence_length,
                               [config.seed, 9_000_000 + i])
            clean.append(generate_sequence(env, walk, None, 0, array, ofdm,
                                           dft))
        predictor = ConvRecurrentPredictor(db.n_t, db.n_c, seed=config.seed)
        predictor_losses = train_predictor(
            predictor, clean,
            PredictorTrainConfig(epochs=config.predictor_epochs,
                                 seed=config.seed))

    dynamic_localizer = (regressor if config.localizer == "regressor"
                         else classifier)
    scenario = None
    if config.scenario != "none":
        scenario = DistortionScenario(
            kind=DistortionKind(config.scenario),
            addition_level_db=config.addition_level_db,
            rng_seed=config.seed)

    n_seq, length = config.n_sequences, config.sequence_length
    x0, y0, x1, y1 = grid.extent()
    fallback = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
    errors = {m: np.zeros((n_seq, length)) for m in METHODS}
    flagged = np.zeros((n_seq, length), dtype=bool)
    distorted = np.zeros((n_seq, length), dtype=bool)
    truths = np.zeros((n_seq, length, 2))
    modes = []
    say(f"running {n_seq} sequences")
    for i in range(n_seq):
        mode = WalkMode.MODE1 if i < n_seq // 2 else WalkMode.MODE2
        modes.append(mode)
        walk = random_walk(grid, mode, length, [config.seed, i])
        seq = generate_sequence(env, walk, scenario, config.distort_from,
                                array, ofdm, dft)
        truth = seq.positions()
        truths[i] = truth
        distorted[i] = [fr.distorted for fr in seq.frames]
        estimates = run_sequence(seq.adps(), dynamic_localizer, db,
                                 thresholds, predictor,
                                 history_length=config.history_length)
        flagged[i] = [e.verdict is not Verdict.ACCURATE for e in estimates]
        tracks = {
            "dynamic": np.stack([e.position for e in estimates]),
            "regressor": _baseline_track(regressor, seq.adps(), fallback),
            "classifier-wknn": _baseline_track(classifier, seq.adps(),
                                               fallback),
            "predictor-only": _predictor_only_track(estimates),
        }
        for method, track in tracks.items():
            errors[method][i] = np.linalg.norm(track - truth, axis=1)
    result = ExperimentResult(
        config=config, db=db, thresholds=thresholds,
        localizers={"regressor": regressor, "classifier-wknn": classifier},
        predictor=predictor, modes=modes, truths=truths, errors=errors,
        flagged=flagged, distorted=distorted,
        train_losses={"regressor": reg_losses, "classifier-wknn": cls_losses,
                      "predictor": predictor_losses},
        runtime_seconds=time.perf_counter() - t0,
    )
    if out_dir is not None:
        emit_report(result, out_dir)
    return result


# --- reports -----------------------------------------------------------------

def emit_report(result: ExperimentResult, out_dir) -> None:
    """Write rmse.csv, rmse_by_mode.csv, per-method CDFs, and report.json.

    Every file except report.json is a pure function of the configuration,
    so reruns produce identical bytes; report.json carries the wall-clock
    numbers and aggregate metrics.
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = ["method,frame,rmse_m"]
    for method in METHODS:
        for k, value in enumerate(result.rmse(method)):
            lines.append(f"{method},{k},{float(value)!r}")
    _write_lines(os.path.join(out_dir, "rmse.csv"), lines)

    lines = ["method,mode,frame,rmse_m"]
    for method in METHODS:
        for mode in (WalkMode.MODE1, WalkMode.MODE2):
            if not any(m is mode for m in result.modes):
                continue
            for k, value in enumerate(result.rmse_by_mode(method, mode)):
                lines.append(
                    f"{method},mode{mode.value},{k},{float(value)!r}")
    _write_lines(os.path.join(out_dir, "rmse_by_mode.csv"), lines)

    for method in METHODS:
        values = np.sort(result.distorted_errors(method))
        _write_lines(os.path.join(out_dir, f"cdf_{method}.txt"),
                     [repr(float(v)) for v in values])

    tp, fp, fn, tn = result.detection_counts()
    precision, recall = result.precision_recall()
    report = {
        "config": result.config.to_dict(),
        "thresholds": {
            "neighborhood_radius": result.thresholds.neighborhood_radius,
            "similarity_floor": result.thresholds.similarity_floor,
            "recovery_radius": result.thresholds.recovery_radius,
        },
        "detection": {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
                      "precision": precision, "recall": recall},
        "median_distorted_error_m": {
            m: float(np.median(result.distorted_errors(m))) for m in METHODS
        },
        "median_distorted_rmse_m": {
            m: result.median_distorted_rmse(m) for m in METHODS
        },
        "final_train_loss": {
            name: (losses[-1] if losses else None)
            for name, losses in result.train_losses.items()
        },
        "runtime_seconds": result.runtime_seconds,
    }
    with open(os.path.join(out_dir, "report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
