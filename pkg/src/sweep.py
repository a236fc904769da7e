"""Resolution x depth x training-size x cycles x fps study on the video task, one result row per cell."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

import netspec
import trainer
import videopipe
from data_io import ImageLoader, SynthConfig, synth_two_domain
from layer_registry import HeadSpec, LabelMode
from trainer import TrainConfig, TrainingData
from utils.constants import VIDEO_HEAD
from utils.exceptions import ConfigurationError, DCNError
from utils.parser_utils import format_table

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["resolution", "depth", "train_fraction", "epochs", "fps", "status", "train_videos", "train_frames",
                 "parameters", "train_loss", "test_loss", "map", "top1", "message"]


@dataclass(frozen=True)
class SweepCell:
    resolution: int
    depth: int
    train_fraction: float
    epochs: int
    fps: float


@dataclass(frozen=True)
class SweepConfig:
    resolutions: tuple[int, ...] = (32, 64)
    depths: tuple[int, ...] = (2, 3)
    train_fractions: tuple[float, ...] = (1.0,)
    fps_values: tuple[float, ...] = (1.0,)
    epochs_values: tuple[int, ...] = ()     # train.epochs when empty
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5))
    synth: SynthConfig = field(default_factory=SynthConfig)
    video_manifest: Optional[str] = None    # synthetic videos when unset
    fc1_width: int = 64
    fc2_width: int = 32
    width_multiplier: float = 0.125
    workers: int = 1

    def __post_init__(self):
        if not (self.resolutions and self.depths and self.train_fractions and self.fps_values):
            raise ConfigurationError("Every sweep axis needs at least one value")
        if any(not 0.0 < f <= 1.0 for f in self.train_fractions):
            raise ConfigurationError(f"Training fractions must be in (0, 1], got {self.train_fractions}")
        if any(f <= 0 for f in self.fps_values):
            raise ConfigurationError(f"fps values must be positive, got {self.fps_values}")
        if any(e < 1 for e in self.epochs_values):
            raise ConfigurationError(f"Epoch counts must be at least 1, got {self.epochs_values}")

    def cells(self) -> list[SweepCell]:
        return [SweepCell(*values) for values in
                itertools.product(self.resolutions, self.depths, self.train_fractions,
                                  self.epochs_values or (self.train.epochs,), self.fps_values)]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _load_videos(cfg: SweepConfig, resolution: int) -> tuple[list[videopipe.VideoRecord], int, Any]:
    if cfg.video_manifest:
        corpus = videopipe.load_video_manifest(cfg.video_manifest)
        return corpus.videos, corpus.class_count, corpus.label_mode
    synth = replace(cfg.synth, resolution=resolution)
    _, videos = synth_two_domain(synth)
    mode = LabelMode.MULTI if synth.labels_per_video > 1 else LabelMode.SINGLE
    return videos, synth.class_count, mode


def run_cell(cell: SweepCell, cfg: SweepConfig) -> dict[str, Any]:
    """Train and evaluate one cell; infeasible and failed cells become rows too."""
    row: dict[str, Any] = {**asdict(cell), "status": "ok", "message": ""}
    try:
        videos, class_count, label_mode = _load_videos(cfg, cell.resolution)
        head = HeadSpec(VIDEO_HEAD, class_count, label_mode)
        try:
            spec = netspec.build_architecture(cell.depth, cell.resolution, [head], fc2_width=cfg.fc2_width,
                                              fc1_width=cfg.fc1_width, width_multiplier=cfg.width_multiplier)
        except ConfigurationError as e:
            logger.warning(f"Cell {cell} infeasible: {e}")
            return {**row, "status": "infeasible", "message": str(e)}

        rng = np.random.default_rng(cfg.train.seed)
        train_videos = [v for v in videos if v.split == "train"]
        keep = max(1, int(math.ceil(len(train_videos) * cell.train_fraction)))
        train_videos = [train_videos[i] for i in sorted(rng.permutation(len(train_videos))[:keep])]
        test_videos = [v for v in videos if v.split == "test"]

        loader = ImageLoader(cell.resolution)
        data = TrainingData(
            primary=videopipe.frame_dataset(train_videos, cell.fps, head),
            loader=loader,
            primary_head=VIDEO_HEAD,
            heldout=videopipe.frame_dataset(test_videos, cell.fps, head),
        )
        params = netspec.init_params(spec, rng)
        params, history = trainer.train(spec, params, data, replace(cfg.train, epochs=cell.epochs), progress=False)
        report = videopipe.evaluate_split(spec, params, test_videos, VIDEO_HEAD, loader)

        last = history.last(VIDEO_HEAD)
        row.update({
            "train_videos": len(train_videos), "train_frames": len(data.primary),
            "parameters": netspec.parameter_count(spec),
            "train_loss": last.train_loss if last else math.nan,
            "test_loss": last.heldout_loss if last else math.nan,
            "map": report.map, "top1": report.top1 if report.top1 is not None else math.nan,
        })
        logger.info(f"Cell {cell}: MAP {report.map:.4f}")
        return row
    except (DCNError, ValueError, ArithmeticError, OSError) as e:
        logger.warning(f"Cell {cell} failed: {e}")
        return {**row, "status": "failed", "message": str(e)}


def run_sweep(cfg: SweepConfig, progress: bool = True) -> pd.DataFrame:
    """Every cell of the cross product, in a deterministic row order."""
    cells = cfg.cells()
    logger.info(f"Running {len(cells)} sweep cells with {cfg.workers} worker(s)")
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(tqdm(pool.map(run_cell, cells, [cfg] * len(cells)), total=len(cells), desc="cells", disable=not progress))
    else:
        rows = [run_cell(cell, cfg) for cell in tqdm(cells, desc="cells", disable=not progress)]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def write_sweep(frame: pd.DataFrame, directory: Path) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, text_path = directory / "sweep.csv", directory / "sweep.txt"
    frame.to_csv(csv_path, index=False, float_format="%.10f")
    text_path.write_text(format_table(frame.drop(columns=["message"])) + "\n")
    return csv_path, text_path
