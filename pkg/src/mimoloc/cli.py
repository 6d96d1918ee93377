"""Command line front end for the evaluation harness.

Every subcommand reads the same JSON experiment configuration (or the
built-in defaults) and a handful of override flags, so a pipeline can be
driven step by step (build-db, train-localizer, ...) or in one shot
(run). Artifacts land in the --out directory under fixed names.

Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .adp import build_dft_pair
from .channel import ArrayConfig, OfdmConfig
from .dynamics import (
    DistortionKind,
    DistortionScenario,
    WalkMode,
    generate_sequence,
    random_walk,
    save_sequences,
)
from .errors import ConfigError, MimolocError
from .experiment import (
    METHODS,
    ExperimentConfig,
    environment_for,
    load_config,
    run_experiment,
)
from .fingerprint import GridSpec, build_db, save_db
from .neural import (
    ClassifierGrid,
    Head,
    TrainConfig,
    build_model,
    default_localizer_spec,
    save_model,
    train,
)
from .pipeline import calibrate_similarity_floor, default_thresholds
from .predictor import (
    ConvRecurrentPredictor,
    PeakTrackingPredictor,
    PredictorTrainConfig,
    save_predictor,
    train_predictor,
)

SUBCOMMANDS = ("build-db", "train-localizer", "train-predictor",
               "gen-sequences", "calibrate-thresholds", "run", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimoloc",
        description="CSI-fingerprint localization pipeline, desk scale.",
    )
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", metavar="PATH",
                        help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", metavar="DIR", default="mimoloc-out",
                        help="artifact directory (default: %(default)s)")
    parser.add_argument("--scenario",
                        choices=["los-block", "nlos-block", "nlos-add",
                                 "none"],
                        help="override the distortion scenario")
    parser.add_argument("--localizer",
                        choices=["regressor", "classifier-wknn"],
                        help="override the localizer choice")
    parser.add_argument("--predictor",
                        choices=["peak-track", "conv-recurrent"],
                        help="override the predictor kind")
    return parser


def _load_effective_config(args) -> ExperimentConfig:
    if args.config:
        try:
            config = load_config(args.config)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {exc}") from exc
    else:
        config = ExperimentConfig()
    overrides = {}
    for name in ("seed", "scenario", "localizer", "predictor"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if overrides:
        config = dataclasses.replace(config, **overrides)
    config.validate()
    return config


def _pieces(config: ExperimentConfig):
    array = ArrayConfig(config.n_antennas, config.wavelength)
    ofdm = OfdmConfig(config.n_subcarriers, config.bandwidth)
    grid = GridSpec(origin=tuple(config.grid_origin),
                    spacing=config.grid_spacing,
                    n_rows=config.grid_rows, n_cols=config.grid_cols)
    dft = build_dft_pair(config.n_antennas, config.n_subcarriers)
    return environment_for(config), array, ofdm, grid, dft


def _build_db(config: ExperimentConfig):
    env, array, ofdm, grid, dft = _pieces(config)
    return build_db(env, grid, array, ofdm, dft, seed=config.seed)


def cmd_build_db(config: ExperimentConfig, out: str) -> None:
    db = _build_db(config)
    path = os.path.join(out, "db.adpf")
    save_db(db, path)
    usable = int(np.sum(~db.zero_flags))
    print(f"wrote {path}: {len(db.positions)} fingerprints, "
          f"{usable} identifiable")


def cmd_train_localizer(config: ExperimentConfig, out: str) -> None:
    db = _build_db(config)
    if config.localizer == "regressor":
        head = Head("regression")
    else:
        head = Head("classification",
                    ClassifierGrid(config.classifier_cells,
                                   config.classifier_cells))
    seed = config.seed if config.localizer == "regressor" else config.seed + 1
    model = build_model(default_localizer_spec(db.n_t, db.n_c, head),
                        (1, db.n_t, db.n_c), head, seed=seed,
                        normalize_input=True)
    losses = train(model, db,
                   TrainConfig(epochs=config.train_epochs,
                               learning_rate=config.train_learning_rate,
                               seed=seed))
    path = os.path.join(out, f"localizer_{config.localizer}.ckpt")
    save_model(model, path)
    print(f"wrote {path}: final loss {losses[-1]:.6f} "
          f"after {len(losses)} epochs")


def cmd_train_predictor(config: ExperimentConfig, out: str) -> None:
    if config.predictor == "peak-track":
        print("peak-track predictor has no trainable parameters; "
              "nothing to do")
        return
    env, array, ofdm, grid, dft = _pieces(config)
    clean = []
    for i in range(config.predictor_train_walks):
        mode = WalkMode.MODE1 if i % 2 == 0 else WalkMode.MODE2
        walk = random_walk(grid, mode, config.sequence_length,
                           [config.seed, 9_000_000 + i])
        clean.append(generate_sequence(env, walk, None, 0, array, ofdm, dft))
    predictor = ConvRecurrentPredictor(config.n_antennas,
                                       config.n_subcarriers,
                                       seed=config.seed)
    losses = train_predictor(predictor, clean,
                             PredictorTrainConfig(
                                 epochs=config.predictor_epochs,
                                 seed=config.seed))
    path = os.path.join(out, "predictor.ckpt")
    save_predictor(predictor, path)
    print(f"wrote {path}: final loss {losses[-1]:.6f} "
          f"after {len(losses)} epochs")


def cmd_gen_sequences(config: ExperimentConfig, out: str) -> None:
    env, array, ofdm, grid, dft = _pieces(config)
    scenario = None
    if config.scenario != "none":
        scenario = DistortionScenario(
            kind=DistortionKind(config.scenario),
            addition_level_db=config.addition_level_db,
            rng_seed=config.seed)
    sequences = []
    for i in range(config.n_sequences):
        mode = (WalkMode.MODE1 if i < config.n_sequences // 2
                else WalkMode.MODE2)
        walk = random_walk(grid, mode, config.sequence_length,
                           [config.seed, i])
        sequences.append(generate_sequence(env, walk, scenario,
                                           config.distort_from, array, ofdm,
                                           dft))
    path = os.path.join(out, "sequences.adpf")
    save_sequences(path, sequences)
    n_frames = sum(len(s) for s in sequences)
    print(f"wrote {path}: {len(sequences)} sequences, {n_frames} frames")


def cmd_calibrate_thresholds(config: ExperimentConfig, out: str) -> None:
    db = _build_db(config)
    grid = db.grid
    thresholds = default_thresholds(grid, calibrate_similarity_floor(db))
    payload = {
        "neighborhood_radius": thresholds.neighborhood_radius,
        "similarity_floor": thresholds.similarity_floor,
        "recovery_radius": thresholds.recovery_radius,
    }
    path = os.path.join(out, "thresholds.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}: " + ", ".join(
        f"{k}={v:.4f}" for k, v in payload.items()))


def cmd_run(config: ExperimentConfig, out: str) -> None:
    result = run_experiment(config, out_dir=out, log=print)
    precision, recall = result.precision_recall()
    print(f"report written to {out}")
    print(f"detection precision={precision:.3f} recall={recall:.3f}")
    for method in METHODS:
        print(f"{method:16s} median distorted-frame rmse "
              f"{result.median_distorted_rmse(method):.3f} m")


def cmd_report(out: str) -> None:
    path = os.path.join(out, "report.json")
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    det = report["detection"]
    print(f"config seed {report['config']['seed']}, scenario "
          f"{report['config']['scenario']}, environment "
          f"{report['config']['environment']}")
    print(f"detection precision={det['precision']:.3f} "
          f"recall={det['recall']:.3f} (tp={det['tp']} fp={det['fp']} "
          f"fn={det['fn']} tn={det['tn']})")
    for method, value in sorted(report["median_distorted_rmse_m"].items()):
        print(f"{method:16s} median distorted-frame rmse {value:.3f} m")
    print(f"runtime {report['runtime_seconds']:.1f} s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.out)
            return 0
        config = _load_effective_config(args)
        os.makedirs(args.out, exist_ok=True)
        handler = {
            "build-db": cmd_build_db,
            "train-localizer": cmd_train_localizer,
            "train-predictor": cmd_train_predictor,
            "gen-sequences": cmd_gen_sequences,
            "calibrate-thresholds": cmd_calibrate_thresholds,
            "run": cmd_run,
        }[args.command]
        handler(config, args.out)
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 3
    except MimolocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
