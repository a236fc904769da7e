"""Video workflow: frame sampling, label propagation, keyframe inference and average-pooling late fusion."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

import metrics
import netspec
from data_io import Dataset, DatasetEntry, Domain, ImageLoader
from layer_registry import HeadSpec, LabelMode, Mode
from metrics import EvalReport
from netspec import NetworkSpec, ParamStore
from tensor_core import Tensor
from trainer import prepare_inputs
from utils.constants import KEYFRAME_FPS
from utils.exceptions import (
    ConfigurationError,
    EmptyVideoError,
    ParameterError,
    ParseError,
    ShapeError,
    ValidationError,
)
from utils.parser_utils import format_labels, parse_int_list, parse_labels

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Rate = Union[float, int, Fraction]

SPLITS = ("train", "test")
_TIME_EPSILON = 1e-9


@dataclass(frozen=True, eq=False)
class Frame:
    timestamp: float
    path: Optional[Path] = None
    image: Optional[Tensor] = None


@dataclass
class VideoRecord:
    id: str
    frames: list[Frame]
    labels: tuple[int, ...]
    split: str = "train"
    keyframes: Optional[tuple[int, ...]] = None     # indices into frames

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"Video {self.id}: split must be one of {SPLITS}, got '{self.split}'")
        times = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError(f"Video {self.id}: frame timestamps must be strictly increasing")
        if self.keyframes is not None:
            if len(set(self.keyframes)) != len(self.keyframes):
                raise ValidationError(f"Video {self.id}: duplicate keyframe indices {self.keyframes}")
            if any(not 0 <= k < len(self.frames) for k in self.keyframes):
                raise ValidationError(f"Video {self.id}: keyframe index outside {len(self.frames)} frames")


@dataclass(frozen=True, eq=False)
class VideoScore:
    video_id: str
    scores: Tensor      # one entry per class of the video head

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ParameterError(f"Video {self.video_id}: non-finite scores")


### Sampling and labels ###

def sample_frames(video: VideoRecord, fps: Rate) -> list[Frame]:
    """Frames nearest at-or-before the targets 0, 1/fps, 2/fps, ... (relative to the first frame).

    A source frame is emitted at most once.
    """
    if fps <= 0:
        raise ParameterError(f"fps must be positive, got {fps}")
    if not video.frames:
        return []

    start = video.frames[0].timestamp
    offsets = np.array([f.timestamp - start for f in video.frames])
    chosen: list[int] = []
    k = 0
    while True:
        target = float(k / fps) if isinstance(fps, Fraction) else k / fps
        if target > offsets[-1] + _TIME_EPSILON:
            break
        index = int(np.searchsorted(offsets, target + _TIME_EPSILON, side="right")) - 1
        if not chosen or index != chosen[-1]:
            chosen.append(index)
        k += 1
    return [video.frames[i] for i in chosen]


def propagate_labels(video: VideoRecord, frames: Sequence[Frame]) -> list[DatasetEntry]:
    """Every sampled frame carries the full video label set, relevant content or not."""
    if not video.labels:
        raise ConfigurationError(f"Video {video.id} has no labels to propagate")
    return [DatasetEntry(tuple(video.labels), Domain.VIDEO_FRAME, path=f.path, image=f.image, video_id=video.id)
            for f in frames]


def frame_dataset(videos: Sequence[VideoRecord], fps: Rate, head: HeadSpec) -> Dataset:
    """Sampled and label-propagated frames of every video, in video order."""
    entries = [entry for video in videos for entry in propagate_labels(video, sample_frames(video, fps))]
    return Dataset(entries, head.class_count, split="frames", label_mode=head.label_mode)


def keyframes_for(video: VideoRecord) -> list[Frame]:
    """Annotated keyframes, or frames sampled at one per second when none are annotated."""
    if video.keyframes is not None:
        return [video.frames[i] for i in video.keyframes]
    frames = sample_frames(video, KEYFRAME_FPS)
    logger.debug(f"Video {video.id}: no keyframes annotated, using {len(frames)} frames sampled at {KEYFRAME_FPS:g} fps")
    return frames


### Inference and fusion ###

def fuse_scores(frame_scores: Tensor) -> Tensor:
    """Elementwise mean over frames; exact sums make it independent of frame order."""
    if frame_scores.ndim != 2 or frame_scores.shape[0] == 0:
        raise ShapeError(f"Expected [frames, classes] scores, got {frame_scores.shape}")
    return np.array([math.fsum(column) for column in frame_scores.T]) / frame_scores.shape[0]


def frame_scores(spec: NetworkSpec, params: ParamStore, frames: Sequence[Frame], head_name: str,
                 loader: ImageLoader, mean_image: Optional[Tensor] = None) -> Tensor:
    """Post-activation head scores ``[frames, classes]`` on eval-mode centre crops."""
    images = [loader.load(frame) for frame in frames]
    inputs = prepare_inputs(images, spec.crop_resolution, None, Mode.EVAL, mean_image)
    return netspec.predict_scores(spec, params, head_name, inputs)


def predict_video(spec: NetworkSpec, params: ParamStore, video: VideoRecord, head_name: str, loader: ImageLoader,
                  mean_image: Optional[Tensor] = None) -> VideoScore:
    frames = keyframes_for(video)
    if not frames:
        raise EmptyVideoError(f"Video {video.id} has no frames")
    scores = frame_scores(spec, params, frames, head_name, loader, mean_image)
    return VideoScore(video.id, fuse_scores(scores))


def predict_split(spec: NetworkSpec, params: ParamStore, videos: Sequence[VideoRecord], head_name: str,
                  loader: ImageLoader, mean_image: Optional[Tensor] = None, workers: int = 1) -> list[VideoScore]:
    """Per-video predictions in input order; ``workers > 1`` runs videos on a thread pool."""
    def predict(video: VideoRecord) -> VideoScore:
        return predict_video(spec, params, video, head_name, loader, mean_image)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(predict, videos))
    return [predict(video) for video in videos]


def evaluate_split(spec: NetworkSpec, params: ParamStore, videos: Sequence[VideoRecord], head_name: str,
                   loader: ImageLoader, split: str = "test", mean_image: Optional[Tensor] = None,
                   workers: int = 1) -> EvalReport:
    """Late-fusion scores for every video of ``split``, then per-class AP, MAP and (single-label) top-k."""
    head = spec.head(head_name)
    selected = [v for v in videos if v.split == split]
    if not selected:
        raise ConfigurationError(f"No videos in split '{split}'")
    fallback = sum(1 for v in selected if v.keyframes is None)
    if fallback:
        logger.warning(f"{fallback} of {len(selected)} videos have no keyframes; using {KEYFRAME_FPS:g}-fps frames")

    scores = np.stack([s.scores for s in predict_split(spec, params, selected, head_name, loader, mean_image, workers)])
    relevance = metrics.relevance_matrix([v.labels for v in selected], head.class_count)
    single = None
    if head.label_mode is LabelMode.SINGLE and all(len(v.labels) == 1 for v in selected):
        single = [v.labels[0] for v in selected]
    report = metrics.evaluate_scores(scores, relevance, single)
    logger.info(f"Evaluated {len(selected)} {split} videos: MAP {report.map:.4f}")
    return report


### Video manifest ###

@dataclass
class VideoCorpus:
    videos: list[VideoRecord]
    class_count: int
    label_mode: LabelMode = LabelMode.SINGLE

    def split(self, name: str) -> list[VideoRecord]:
        return [v for v in self.videos if v.split == name]


def load_video_manifest(path: PathLike, class_count: Optional[int] = None, check_files: bool = True) -> VideoCorpus:
    """One video per line: ``id<TAB>split<TAB>labels<TAB>t:path;t:path[<TAB>keyframes]``.

    Labels are ``;``-separated class ids, keyframes ``,``-separated frame
    indices. Frame paths are relative to the manifest's directory.
    """
    path = Path(path)
    header: dict[str, str] = {}
    videos: list[VideoRecord] = []
    for line_number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if ":" in body:
                key, value = body.split(":", 1)
                header[key.strip()] = value.strip()
            continue
        fields = raw.split("\t")
        if len(fields) not in (4, 5):
            raise ParseError(str(path), line_number, "expected 'id<TAB>split<TAB>labels<TAB>frames[<TAB>keyframes]'")
        try:
            frames = []
            for item in filter(None, fields[3].split(";")):
                stamp, _, frame_path = item.partition(":")
                if not frame_path:
                    raise ValueError(f"frame entry '{item}' is not 'timestamp:path'")
                frames.append(Frame(float(stamp), path=path.parent / frame_path))
            keyframes = tuple(parse_int_list(fields[4])) if len(fields) == 5 and fields[4].strip() else None
            video = VideoRecord(fields[0], frames, parse_labels(fields[2]), fields[1], keyframes)
        except (ValueError, ConfigurationError) as e:
            raise ParseError(str(path), line_number, str(e)) from e
        if check_files:
            missing = [str(f.path) for f in frames if not f.path.is_file()]
            if missing:
                raise ValidationError(f"{path}:{line_number}: missing frame files {missing[:3]}")
        videos.append(video)

    vocabulary = int(header["vocabulary"]) if "vocabulary" in header else class_count
    if vocabulary is None:
        vocabulary = max((max(v.labels) for v in videos), default=0) + 1
    for video in videos:
        if any(not 0 <= label < vocabulary for label in video.labels):
            raise ValidationError(f"{path}: video {video.id} labels {video.labels} outside vocabulary of {vocabulary}")
    multi = header.get("label_mode") == LabelMode.MULTI.value or any(len(v.labels) > 1 for v in videos)
    logger.info(f"Loaded {len(videos)} videos from {path}")
    return VideoCorpus(videos, max(vocabulary, 1), LabelMode.MULTI if multi else LabelMode.SINGLE)


def write_video_manifest(videos: Sequence[VideoRecord], path: PathLike, class_count: int,
                         label_mode: LabelMode = LabelMode.SINGLE) -> None:
    path = Path(path)
    lines = [f"# vocabulary: {class_count}", f"# label_mode: {label_mode.value}"]
    for video in videos:
        if any(f.path is None for f in video.frames):
            raise ConfigurationError(f"Video {video.id} has in-memory frames; write the images first")
        frames = ";".join(f"{f.timestamp!r}:{Path(os.path.relpath(f.path, path.parent)).as_posix()}" for f in video.frames)
        keyframes = ",".join(str(k) for k in video.keyframes) if video.keyframes is not None else ""
        lines.append("\t".join([video.id, video.split, format_labels(video.labels), frames, keyframes]))
    path.write_text("\n".join(lines) + "\n")
