"""Command-line surface: ``python src/cli.py <command> [flags]``.

Every command writes into its own run directory (``config.json``,
``run.log`` and the command's artifacts). Exit status is 0 on success,
1 when a gradient check fails and 2 on configuration, data or format errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import gradcheck
import netspec
import sweep
import tensor_core
import transfer
import videopipe
from data_io import ImageLoader, SynthConfig, load_manifest, split_dataset, write_synthetic_corpus
from layer_registry import HeadSpec, LabelMode
from trainer import MetricsLog, TrainConfig, TrainingData, train
from utils.constants import (
    BATCH_SIZE,
    CLI_DESCRIPTION,
    DEFAULT_OUT_DIR,
    DROPOUT_RATE,
    ENV_LOG_LEVEL,
    ENV_OUT_DIR,
    ENV_WORKERS,
    EPOCHS,
    FC1_WIDTH,
    FC2_WIDTH_FLICKR,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    IMAGE_HEAD,
    LEARNING_RATE,
    LOG_DATE_FORMAT,
    LOG_FORMAT,
    LR_DECAY_FACTOR,
    MOMENTUM,
    RESULTS_TABLE_COLUMNS,
    SUPPORTED_DEPTHS,
    SUPPORTED_RESOLUTIONS,
    TRAIN_FPS,
    VIDEO_HEAD,
    WEIGHT_DECAY,
)
from utils.exceptions import ConfigurationError, DCNError, IncompatibleTransplantError
from utils.parser_utils import format_table, parse_config_info, parse_float_list, parse_int_list
from utils.plot_utils import create_kernel_mosaic, create_loss_curves

logger = logging.getLogger(__name__)

DEFAULT_DEPTH = 2
DEFAULT_RESOLUTION = 32
LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


@dataclass(frozen=True)
class RunConfig:
    """Resolved invocation: command, run directory and every flag value."""
    command: str
    run_dir: Path
    options: dict[str, Any]

    def write(self) -> Path:
        path = self.run_dir / "config.json"
        payload = {"command": self.command, "run_dir": str(self.run_dir), "options": self.options}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
        return path


### Parser ###

def _common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--log-level", choices=LOG_LEVELS, default=os.getenv(ENV_LOG_LEVEL, "INFO"))
    parent.add_argument("--config", help="JSON file of flag defaults (keys use underscores)")
    parent.add_argument("--run-name", help="run directory name; default <command>-<timestamp>")
    parent.add_argument("--out", default=os.getenv(ENV_OUT_DIR, DEFAULT_OUT_DIR), help="parent of run directories")
    parent.add_argument("--workers", type=int, default=int(os.getenv(ENV_WORKERS, "1")))
    parent.add_argument("--seed", type=int, default=0)
    return parent


def _architecture_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--depth", type=int, choices=SUPPORTED_DEPTHS, help=f"conv layers (default {DEFAULT_DEPTH})")
    parent.add_argument("--resolution", type=int, choices=SUPPORTED_RESOLUTIONS,
                        help=f"input resolution (default {DEFAULT_RESOLUTION})")
    parent.add_argument("--fc1-width", type=int, default=FC1_WIDTH)
    parent.add_argument("--fc2-width", type=int, default=FC2_WIDTH_FLICKR)
    parent.add_argument("--width-multiplier", type=float, default=1.0, help="scale every conv kernel count")
    parent.add_argument("--dropout", type=float, default=DROPOUT_RATE)
    parent.add_argument("--linear", action="store_true", help="linear classifier on raw pixels instead of a conv net")
    return parent


def _training_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--epochs", type=int, default=EPOCHS)
    parent.add_argument("--lr", type=float, default=LEARNING_RATE)
    parent.add_argument("--momentum", type=float, default=MOMENTUM)
    parent.add_argument("--weight-decay", type=float, default=WEIGHT_DECAY)
    parent.add_argument("--batch-size", type=int, default=BATCH_SIZE)
    parent.add_argument("--lr-decay-step", type=int, default=0, help="epochs between decays; 0 keeps lr fixed")
    parent.add_argument("--lr-decay-factor", type=float, default=LR_DECAY_FACTOR)
    parent.add_argument("--float32", action="store_true", help="train in float32 instead of float64")
    parent.add_argument("--mean-subtraction", action="store_true")
    return parent


def _synth_flags(parser: argparse.ArgumentParser) -> None:
    defaults = SynthConfig()
    parser.add_argument("--classes", type=int, default=defaults.class_count)
    parser.add_argument("--images", type=int, default=defaults.image_domain_size)
    parser.add_argument("--videos", type=int, default=defaults.video_count)
    parser.add_argument("--frames-per-video", type=int, default=defaults.frames_per_video)
    parser.add_argument("--noise", type=float, default=defaults.noise)
    parser.add_argument("--label-noise", type=float, default=defaults.label_noise)
    parser.add_argument("--labels-per-video", type=int, default=defaults.labels_per_video)
    parser.add_argument("--irrelevant-rate", type=float, default=defaults.irrelevant_frame_rate)
    parser.add_argument("--frame-interval", type=float, default=defaults.frame_interval)
    parser.add_argument("--test-fraction", type=float, default=defaults.test_fraction)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    """Top-level parser plus the subparser of every command (for ``--config`` defaults)."""
    parser = argparse.ArgumentParser(prog="dcn", description=CLI_DESCRIPTION,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subparsers = parser.add_subparsers(dest="command", required=True)
    common, arch, training = _common_flags(), _architecture_flags(), _training_flags()
    commands: dict[str, argparse.ArgumentParser] = {}

    p = subparsers.add_parser("synth", parents=[common], help="write a synthetic image + video corpus")
    p.add_argument("--resolution", type=int, choices=SUPPORTED_RESOLUTIONS, default=DEFAULT_RESOLUTION)
    p.add_argument("--dest", help="corpus directory; default <run dir>/corpus")
    _synth_flags(p)
    commands["synth"] = p

    p = subparsers.add_parser("pretrain", parents=[common, arch, training], help="train on an image manifest")
    p.add_argument("--images", required=True, help="image manifest (.tsv)")
    p.add_argument("--heldout-fraction", type=float, default=0.1)
    commands["pretrain"] = p

    p = subparsers.add_parser("transfer", parents=[common, arch, training], help="fine-tune on video frames")
    p.add_argument("--videos", required=True, help="video manifest (.tsv)")
    p.add_argument("--init", default="random", help="'random' or a checkpoint path")
    p.add_argument("--init-label", help="value of the init column in the results table")
    p.add_argument("--policy", choices=[policy.value for policy in transfer.FreezePolicy],
                   default=transfer.FreezePolicy.FC_PLUS_CONV.value)
    p.add_argument("--augment", help="image manifest mixed into every batch on its own head")
    p.add_argument("--fps", type=Fraction, default=Fraction(TRAIN_FPS), help="frame sampling rate, e.g. 1 or 1/4")
    p.add_argument("--table", help="results table (.csv) to append the summary row to")
    commands["transfer"] = p

    p = subparsers.add_parser("eval", parents=[common], help="late-fusion evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--videos", required=True, help="video manifest (.tsv)")
    p.add_argument("--split", default="test", choices=videopipe.SPLITS)
    p.add_argument("--head", default=VIDEO_HEAD)
    p.add_argument("--mean-image", help="mean crop tensor written by a mean-subtracted training run")
    commands["eval"] = p

    p = subparsers.add_parser("sweep", parents=[common, training], help="resolution x depth x size x cycles x fps study")
    p.add_argument("--videos", help="video manifest; synthetic videos when omitted")
    p.add_argument("--resolutions", type=parse_int_list, default=[32, 64])
    p.add_argument("--depths", type=parse_int_list, default=[2, 3])
    p.add_argument("--train-fractions", type=parse_float_list, default=[1.0])
    p.add_argument("--fps-values", type=parse_float_list, default=[1.0])
    p.add_argument("--epochs-list", type=parse_int_list, help="training cycles per cell; default --epochs")
    p.add_argument("--fc1-width", type=int, default=64)
    p.add_argument("--fc2-width", type=int, default=32)
    p.add_argument("--width-multiplier", type=float, default=0.125)
    p.add_argument("--classes", type=int, default=SynthConfig.class_count)
    p.add_argument("--synth-videos", type=int, default=SynthConfig.video_count)
    p.add_argument("--frames-per-video", type=int, default=SynthConfig.frames_per_video)
    commands["sweep"] = p

    p = subparsers.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--step", type=float, default=GRADCHECK_STEP)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    commands["gradcheck"] = p

    p = subparsers.add_parser("report", parents=[common], help="tables and plots from earlier runs")
    p.add_argument("--metrics", nargs="+", required=True, help="metrics.csv files")
    p.add_argument("--kernels", help="checkpoint whose first-layer kernels are drawn")
    p.add_argument("--compare", help="second checkpoint; prints first-layer kernel similarity to --kernels")
    commands["report"] = p

    p = subparsers.add_parser("describe", parents=[common, arch], help="print an architecture")
    p.add_argument("--classes", type=int, default=SynthConfig.class_count)
    p.add_argument("--multi-label", action="store_true")
    commands["describe"] = p

    return parser, commands


### Helpers ###

def configure_logging(level: str, run_dir: Optional[Path] = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if run_dir is not None:
        handlers.append(logging.FileHandler(run_dir / "run.log"))
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT, handlers=handlers, force=True)


def _read_config_file(path: str, known: set[str]) -> dict[str, Any]:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    values = {key.replace("-", "_"): value for key, value in values.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"Config file {path} has unknown keys {unknown}")
    return values


def _make_run_dir(args: argparse.Namespace) -> Path:
    name = args.run_name or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = Path(args.out) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _build_spec(args: argparse.Namespace, heads: list[HeadSpec]) -> netspec.NetworkSpec:
    resolution = args.resolution or DEFAULT_RESOLUTION
    if args.linear:
        return netspec.build_linear_baseline(resolution, heads)
    return netspec.build_architecture(args.depth or DEFAULT_DEPTH, resolution, heads, fc2_width=args.fc2_width,
                                      fc1_width=args.fc1_width, width_multiplier=args.width_multiplier,
                                      dropout_rate=args.dropout)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                       lr_decay_step=args.lr_decay_step, lr_decay_factor=args.lr_decay_factor,
                       dtype="float32" if args.float32 else "float64", mean_subtraction=args.mean_subtraction)


def _metrics_log(run_dir: Path) -> MetricsLog:
    path = run_dir / "metrics.csv"
    path.unlink(missing_ok=True)
    return MetricsLog(path)


def _write_mean_image(run_dir: Path, mean_image) -> None:
    if mean_image is not None:
        tensor_core.write_tensor(run_dir / "mean_image.dcnt", mean_image)


def append_results_row(path: Path, row: dict[str, Any]) -> pd.DataFrame:
    """Append one row to a results table (created with a header when missing) and return the whole table."""
    frame = pd.DataFrame([row], columns=RESULTS_TABLE_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.10f")
    return pd.read_csv(path)


### Commands ###

def cmd_synth(args: argparse.Namespace, run_dir: Path) -> int:
    cfg = SynthConfig(seed=args.seed, class_count=args.classes, image_domain_size=args.images,
                      video_count=args.videos, frames_per_video=args.frames_per_video, resolution=args.resolution,
                      noise=args.noise, label_noise=args.label_noise, labels_per_video=args.labels_per_video,
                      irrelevant_frame_rate=args.irrelevant_rate, frame_interval=args.frame_interval,
                      test_fraction=args.test_fraction)
    images, videos = write_synthetic_corpus(cfg, Path(args.dest) if args.dest else run_dir / "corpus")
    print(f"images: {images}\nvideos: {videos}")
    return 0


def cmd_pretrain(args: argparse.Namespace, run_dir: Path) -> int:
    dataset = load_manifest(args.images)
    if len(dataset) == 0:
        raise ConfigurationError(f"Image manifest {args.images} is empty")
    spec = _build_spec(args, [HeadSpec(IMAGE_HEAD, dataset.class_count, dataset.label_mode)])
    cfg = _train_config(args)
    rng = np.random.default_rng(args.seed)
    train_ds, heldout = split_dataset(dataset, args.heldout_fraction, rng)
    logger.info(f"Pre-training on {len(train_ds)} images, {len(heldout)} held out, "
                f"{netspec.parameter_count(spec)} parameters")

    data = TrainingData(primary=train_ds, loader=ImageLoader(spec.input_resolution), primary_head=IMAGE_HEAD,
                        heldout=heldout)
    params, history = train(spec, netspec.init_params(spec, rng), data, cfg, _metrics_log(run_dir))
    netspec.save_checkpoint(spec, params, run_dir / "checkpoint.dcn")
    _write_mean_image(run_dir, history.mean_image)
    print(format_table(history.to_frame()))
    return 0


def cmd_transfer(args: argparse.Namespace, run_dir: Path) -> int:
    corpus = videopipe.load_video_manifest(args.videos)
    heads = [HeadSpec(VIDEO_HEAD, corpus.class_count, corpus.label_mode)]
    images = None
    if args.augment:
        images = load_manifest(args.augment)
        heads.append(HeadSpec(IMAGE_HEAD, images.class_count, images.label_mode))

    source = None
    if args.init != "random":
        source = netspec.load_checkpoint(args.init)
        spec = _build_spec(args, heads) if (args.depth or args.resolution or args.linear) else source[0].with_heads(heads)
    else:
        spec = _build_spec(args, heads)

    train_videos, test_videos = corpus.split("train"), corpus.split("test")
    if not train_videos:
        raise ConfigurationError(f"Video manifest {args.videos} has no train videos")
    loader = ImageLoader(spec.input_resolution)
    data = TrainingData(
        primary=videopipe.frame_dataset(train_videos, args.fps, heads[0]),
        loader=loader,
        primary_head=VIDEO_HEAD,
        auxiliary=images,
        auxiliary_head=IMAGE_HEAD,
        heldout=videopipe.frame_dataset(test_videos, args.fps, heads[0]) if test_videos else None,
    )
    policy = transfer.FreezePolicy(args.policy)
    try:
        result = transfer.transfer_train(source, spec, data, policy, _train_config(args), _metrics_log(run_dir))
    except IncompatibleTransplantError as e:
        if e.report is not None:
            (run_dir / "transplant.txt").write_text(e.report.to_text())
        raise

    if result.report is not None:
        (run_dir / "transplant.txt").write_text(result.report.to_text())
    netspec.save_checkpoint(result.spec, result.params, run_dir / "checkpoint.dcn")
    _write_mean_image(run_dir, result.history.mean_image)

    report = videopipe.evaluate_split(result.spec, result.params, corpus.videos, VIDEO_HEAD, loader, "test",
                                      result.history.mean_image, args.workers)
    report.write(run_dir)
    row = {
        "depth": spec.depth,
        "init": args.init_label or ("random" if source is None else "pretrained"),
        "training_set": "video + image" if images is not None else "video",
        "update_policy": policy.label,
        "map": report.map,
    }
    table = append_results_row(run_dir / "results.csv", row)
    if args.table:
        table = append_results_row(Path(args.table), row)
    print(report.to_text())
    print(format_table(table))
    return 0


def cmd_eval(args: argparse.Namespace, run_dir: Path) -> int:
    spec, params = netspec.load_checkpoint(args.checkpoint)
    netspec.validate_params(spec, params)
    corpus = videopipe.load_video_manifest(args.videos)
    head = spec.head(args.head)
    if head.class_count != corpus.class_count:
        raise ConfigurationError(f"Checkpoint head '{head.name}' has {head.class_count} classes, "
                                 f"manifest {args.videos} has {corpus.class_count}")
    mean_image = tensor_core.read_tensor(args.mean_image) if args.mean_image else None
    report = videopipe.evaluate_split(spec, params, corpus.videos, args.head, ImageLoader(spec.input_resolution),
                                      args.split, mean_image, args.workers)
    report.write(run_dir)
    print(report.to_text())
    return 0


def cmd_sweep(args: argparse.Namespace, run_dir: Path) -> int:
    synth = SynthConfig(seed=args.seed, class_count=args.classes, video_count=args.synth_videos,
                        frames_per_video=args.frames_per_video)
    cfg = sweep.SweepConfig(resolutions=tuple(args.resolutions), depths=tuple(args.depths),
                            train_fractions=tuple(args.train_fractions), fps_values=tuple(args.fps_values),
                            epochs_values=tuple(args.epochs_list or ()),
                            train=_train_config(args), synth=synth, video_manifest=args.videos,
                            fc1_width=args.fc1_width, fc2_width=args.fc2_width,
                            width_multiplier=args.width_multiplier, workers=args.workers)
    frame = sweep.run_sweep(cfg)
    sweep.write_sweep(frame, run_dir)
    print(format_table(frame.drop(columns=["message"])))
    return 0


def cmd_gradcheck(args: argparse.Namespace, run_dir: Path,
                  backward_overrides: Optional[dict[str, gradcheck.BackwardFn]] = None) -> int:
    results = gradcheck.gradient_check_suite(np.random.default_rng(args.seed), args.step, args.tolerance,
                                             backward_overrides)
    frame = pd.DataFrame([{"check": r.name, "max_relative_error": r.max_relative_error, "passed": r.passed}
                          for r in results])
    frame.to_csv(run_dir / "gradcheck.csv", index=False)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.3e}"))
    return 0 if all(r.passed for r in results) else 1


def _first_kernels(path: str) -> np.ndarray:
    spec, params = netspec.load_checkpoint(path)
    if not spec.conv_layers:
        raise ConfigurationError(f"Checkpoint {path} has no conv layers")
    return params[spec.conv_layers[0].name].tensors["weight"]


def cmd_report(args: argparse.Namespace, run_dir: Path) -> int:
    frames = []
    for path in args.metrics:
        frame = MetricsLog.read(path)
        frame.insert(0, "run", Path(path).parent.name)
        frames.append(frame)
    metrics_frame = pd.concat(frames, ignore_index=True)
    print(format_table(metrics_frame))

    for run, rows in metrics_frame.groupby("run", sort=True):
        create_loss_curves(rows, title=f"Training curves: {run}").save(run_dir / f"loss_curves_{run}.png")
    if args.kernels:
        kernels = _first_kernels(args.kernels)
        create_kernel_mosaic(kernels).save(run_dir / "kernels.png")
        if args.compare:
            similarity = transfer.kernel_similarity(kernels, _first_kernels(args.compare))
            print(f"kernel similarity {similarity:.4f}")
    return 0


def cmd_describe(args: argparse.Namespace, run_dir: Path) -> int:
    mode = LabelMode.MULTI if args.multi_label else LabelMode.SINGLE
    spec = _build_spec(args, [HeadSpec(VIDEO_HEAD, args.classes, mode)])
    frame = netspec.describe_architecture(spec)
    frame.to_csv(run_dir / "architecture.csv", index=False)
    print(format_table(frame))
    print(f"total parameters: {netspec.parameter_count(spec)}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, Path], int]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "describe": cmd_describe,
}


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            commands[args.command].set_defaults(**_read_config_file(args.config, set(vars(args))))
            args = parser.parse_args(argv)

        run_dir = _make_run_dir(args)
        configure_logging(args.log_level, run_dir)
        run = RunConfig(args.command, run_dir, vars(args))
        run.write()
        logger.info(parse_config_info(run.options, title=f"Running '{args.command}'"))
        return COMMANDS[args.command](args, run_dir)
    except (DCNError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
