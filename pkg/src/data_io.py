"""Datasets, manifests, image decoding and the synthetic two-domain generator.

Images are channel-first float tensors in [0, 1]. On disk they are binary
PPM (P6) files or raw tensors in the ``tensor_core`` format (``.dcnt``).
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

import layers
import tensor_core
from layer_registry import LabelMode
from layers import ConvParams
from tensor_core import Tensor
from utils.constants import SUPPORTED_RESOLUTIONS
from utils.exceptions import ConfigurationError, FormatError, ParseError, ShapeError, ValidationError
from utils.parser_utils import format_labels, parse_labels

if TYPE_CHECKING:
    from videopipe import VideoRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PPM_SUFFIXES = (".ppm",)
RAW_SUFFIXES = (".dcnt",)


class Domain(Enum):
    IMAGE = "image"
    VIDEO_FRAME = "video_frame"


@dataclass(frozen=True, eq=False)
class DatasetEntry:
    """One labelled image, on disk (``path``) or in memory (``image``)."""
    labels: tuple[int, ...]
    domain: Domain = Domain.IMAGE
    path: Optional[Path] = None
    image: Optional[Tensor] = None
    video_id: Optional[str] = None

    def __post_init__(self):
        if self.path is None and self.image is None:
            raise ConfigurationError("A dataset entry needs a path or an in-memory image")


@dataclass
class Dataset:
    entries: list[DatasetEntry]
    class_count: int
    split: str = "train"
    label_mode: LabelMode = LabelMode.SINGLE

    def __post_init__(self):
        for i, entry in enumerate(self.entries):
            bad = [label for label in entry.labels if not 0 <= label < self.class_count]
            if bad or not entry.labels:
                raise ValidationError(f"Entry {i}: labels {entry.labels} outside vocabulary of {self.class_count} classes")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[DatasetEntry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> DatasetEntry:
        return self.entries[index]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, entries=[self.entries[int(i)] for i in indices])

    def label_sets(self) -> list[tuple[int, ...]]:
        return [entry.labels for entry in self.entries]


def split_dataset(dataset: Dataset, heldout_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random (train, held-out) partition; the training part keeps at least one entry."""
    if not 0.0 <= heldout_fraction < 1.0:
        raise ConfigurationError(f"Held-out fraction must be in [0, 1), got {heldout_fraction}")
    order = rng.permutation(len(dataset))
    heldout_count = min(int(round(len(dataset) * heldout_fraction)), max(len(dataset) - 1, 0))
    heldout = replace(dataset.subset(sorted(order[:heldout_count])), split="heldout")
    return dataset.subset(sorted(order[heldout_count:])), heldout


### Manifests ###

def _read_header(line: str, header: dict[str, str]) -> None:
    body = line.lstrip("#").strip()
    if ":" in body:
        key, value = body.split(":", 1)
        header[key.strip()] = value.strip()


def load_manifest(path: PathLike, class_count: Optional[int] = None, check_files: bool = True) -> Dataset:
    """Read an image manifest: ``path<TAB>labels[<TAB>domain]`` per line.

    Labels are ``;``-separated class ids. ``# vocabulary: N`` and
    ``# label_mode: multi`` header lines are optional; paths are relative to
    the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    header: dict[str, str] = {}
    rows: list[tuple[int, DatasetEntry]] = []

    for line_number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            _read_header(line, header)
            continue
        fields = raw.rstrip("\n").split("\t")
        if len(fields) not in (2, 3) or not fields[0]:
            raise ParseError(str(path), line_number, f"expected 'path<TAB>labels[<TAB>domain]', got {raw!r}")
        try:
            labels = parse_labels(fields[1])
            domain = Domain(fields[2]) if len(fields) == 3 and fields[2] else Domain.IMAGE
        except ValueError as e:
            raise ParseError(str(path), line_number, str(e)) from e
        image_path = base / fields[0]
        if check_files and not image_path.is_file():
            raise ValidationError(f"{path}:{line_number}: image file {image_path} does not exist")
        rows.append((line_number, DatasetEntry(labels, domain, path=image_path)))

    vocabulary = int(header["vocabulary"]) if "vocabulary" in header else class_count
    if vocabulary is None:
        vocabulary = max((max(e.labels) for _, e in rows), default=0) + 1
    for line_number, entry in rows:
        outside = [label for label in entry.labels if not 0 <= label < vocabulary]
        if outside:
            raise ValidationError(f"{path}:{line_number}: class ids {outside} outside vocabulary of {vocabulary}")

    entries = [entry for _, entry in rows]
    multi = header.get("label_mode") == LabelMode.MULTI.value or any(len(e.labels) > 1 for e in entries)
    logger.info(f"Loaded {len(entries)} entries from {path} ({vocabulary} classes)")
    return Dataset(entries, max(vocabulary, 1), label_mode=LabelMode.MULTI if multi else LabelMode.SINGLE)


def write_manifest(dataset: Dataset, path: PathLike) -> None:
    path = Path(path)
    lines = [f"# vocabulary: {dataset.class_count}", f"# label_mode: {dataset.label_mode.value}"]
    for entry in dataset:
        if entry.path is None:
            raise ConfigurationError("Only entries stored on disk can be written to a manifest")
        relative = os.path.relpath(entry.path, path.parent)
        lines.append(f"{Path(relative).as_posix()}\t{format_labels(entry.labels)}\t{entry.domain.value}")
    path.write_text("\n".join(lines) + "\n")


### Images ###

def resize_image(image: Tensor, resolution: int) -> Tensor:
    """Bilinear resize of every channel to ``resolution x resolution``.

    Pillow resamples in float32 (mode "F"), so resized values carry about 1e-7
    relative error; the result is returned in the input's dtype.
    """
    if image.ndim != 3:
        raise ShapeError(f"Expected a [C, H, W] image, got {image.shape}")
    if image.shape[1:] == (resolution, resolution):
        return image
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32))
                   .resize((resolution, resolution), Image.Resampling.BILINEAR), dtype=image.dtype)
        for plane in image
    ]
    return np.stack(channels)


def load_image(path: PathLike, target_resolution: int) -> Tensor:
    """Decode a PPM or raw tensor image to ``[3, R, R]`` in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        image = tensor_core.read_tensor(path)
        if image.ndim != 3 or image.shape[0] != 3:
            raise FormatError(f"{path}: raw image must be [3, H, W], got {image.shape}")
    elif suffix in PPM_SUFFIXES:
        try:
            with Image.open(path) as pil:
                if pil.format != "PPM" or pil.mode != "RGB":
                    raise FormatError(f"{path}: expected a binary RGB pixmap, got {pil.format} {pil.mode}")
                image = np.asarray(pil, dtype=np.float64).transpose(2, 0, 1) / 255.0
        except (UnidentifiedImageError, OSError) as e:
            raise FormatError(f"{path}: cannot decode image ({e})") from e
    else:
        raise FormatError(f"{path}: unsupported image format '{suffix}' (use .ppm or .dcnt)")
    return resize_image(image, target_resolution)


def save_image(path: PathLike, image: Tensor) -> None:
    path = Path(path)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"Expected a [3, H, W] image, got {image.shape}")
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        tensor_core.write_tensor(path, image)
    elif suffix in PPM_SUFFIXES:
        pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
    else:
        raise FormatError(f"{path}: unsupported image format '{suffix}' (use .ppm or .dcnt)")


class ImageLoader:
    """Resolves dataset entries and video frames to ``[3, R, R]`` tensors, caching decoded files."""

    def __init__(self, resolution: int, cache: bool = True):
        if resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigurationError(f"Resolution {resolution} not in {SUPPORTED_RESOLUTIONS}")
        self.resolution = resolution
        self.cache = cache
        self._decoded: dict[Path, Tensor] = {}

    def load(self, item) -> Tensor:
        """``item`` is anything with ``image`` and ``path`` attributes."""
        if item.image is not None:
            return resize_image(item.image, self.resolution)
        key = Path(item.path)
        if key in self._decoded:
            return self._decoded[key]
        image = load_image(key, self.resolution)
        if self.cache:
            self._decoded[key] = image
        return image

    def load_many(self, items: Sequence) -> Tensor:
        return np.stack([self.load(item) for item in items])


### Synthetic two-domain corpus ###

@dataclass(frozen=True)
class SynthConfig:
    """Seeded generator settings.

    Every class is one motif (an oriented bar with a corner arm). The image
    domain draws motifs on a high-frequency striped background, the video
    domain on a smooth gradient.
    """
    seed: int = 0
    class_count: int = 4
    image_domain_size: int = 400
    video_count: int = 40
    frames_per_video: int = 8
    resolution: int = 32
    noise: float = 0.05
    jitter: Optional[int] = None            # max motif offset from centre; default resolution // 8
    image_texture: float = 0.8
    video_texture: float = 0.6
    label_noise: float = 0.0
    labels_per_video: int = 1
    irrelevant_frame_rate: float = 0.0
    frame_interval: float = 0.25
    test_fraction: float = 0.5

    def __post_init__(self):
        counts = {"class_count": self.class_count, "image_domain_size": self.image_domain_size,
                  "video_count": self.video_count, "frames_per_video": self.frames_per_video,
                  "labels_per_video": self.labels_per_video}
        for name, value in counts.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigurationError(f"Resolution {self.resolution} not in {SUPPORTED_RESOLUTIONS}")
        if self.labels_per_video > self.class_count:
            raise ConfigurationError(f"labels_per_video {self.labels_per_video} exceeds {self.class_count} classes")
        for name in ("label_noise", "irrelevant_frame_rate", "test_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        for name in ("image_texture", "video_texture"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.noise < 0 or self.frame_interval <= 0:
            raise ConfigurationError(f"Invalid noise {self.noise} / frame interval {self.frame_interval}")

    @property
    def motif_size(self) -> int:
        return self.resolution // 2

    @property
    def max_jitter(self) -> int:
        limit = (self.resolution - self.motif_size) // 2
        return min(limit, self.resolution // 8 if self.jitter is None else self.jitter)


def class_motifs(cfg: SynthConfig) -> Tensor:
    """``[classes, m, m]`` binary motifs; class ``c`` is oriented at ``pi * c / classes``."""
    m = cfg.motif_size
    coords = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    half_width = max(0.12, 3.0 / m)

    motifs = np.zeros((cfg.class_count, m, m))
    for c in range(cfg.class_count):
        theta = math.pi * c / cfg.class_count
        along = u * math.cos(theta) + v * math.sin(theta)
        across = -u * math.sin(theta) + v * math.cos(theta)
        bar = (np.abs(across) <= half_width) & (np.abs(along) <= 0.75)
        # corner arm leaving the bar's end perpendicular to it
        arm = (np.abs(along - 0.75) <= half_width) & (across >= 0.0) & (across <= 0.45)
        motifs[c] = (bar | arm).astype(np.float64)
    return motifs


def domain_background(cfg: SynthConfig, domain: Domain) -> Tensor:
    """Deterministic ``[3, R, R]`` background texture of a domain, values in [0, 1]."""
    R = cfg.resolution
    y, x = np.mgrid[0:R, 0:R].astype(np.float64)
    phases = [0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0]
    if domain is Domain.IMAGE:
        planes = [np.sign(np.sin(2.0 * math.pi * (x + y) / 4.0 + p)) for p in phases]
        amplitude = cfg.image_texture
    else:
        planes = [np.cos(math.pi * (x / R) + p) * np.cos(math.pi * (y / R) - p) for p in phases]
        amplitude = cfg.video_texture
    return np.stack([0.5 + 0.5 * amplitude * plane for plane in planes])


def _place(cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int]:
    centre = (cfg.resolution - cfg.motif_size) // 2
    j = cfg.max_jitter
    top, left = centre + rng.integers(-j, j + 1, size=2)
    return int(top), int(left)


def _render(cfg: SynthConfig, background: Tensor, motifs: Tensor, placements: Sequence[tuple[int, int, int]],
            rng: np.random.Generator) -> Tensor:
    """Background and motif canvas mixed 50/50, plus Gaussian noise, clipped to [0, 1]."""
    m = cfg.motif_size
    canvas = np.zeros((cfg.resolution, cfg.resolution))
    limit = cfg.resolution - m
    for label, top, left in placements:
        top, left = min(max(top, 0), limit), min(max(left, 0), limit)
        window = canvas[top:top + m, left:left + m]
        np.maximum(window, motifs[label], out=window)
    image = 0.5 * background + 0.5 * canvas[None]
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def synth_two_domain(cfg: SynthConfig) -> tuple[Dataset, list["VideoRecord"]]:
    """Seeded image-domain dataset plus labelled videos sharing the same class motifs."""
    from videopipe import Frame, VideoRecord

    rng = np.random.default_rng(cfg.seed)
    motifs = class_motifs(cfg)
    image_bg = domain_background(cfg, Domain.IMAGE)
    video_bg = domain_background(cfg, Domain.VIDEO_FRAME)

    entries = []
    for i in range(cfg.image_domain_size):
        label = i % cfg.class_count
        image = _render(cfg, image_bg, motifs, [(label, *_place(cfg, rng))], rng)
        if cfg.label_noise > 0 and cfg.class_count > 1 and rng.random() < cfg.label_noise:
            label = int((label + rng.integers(1, cfg.class_count)) % cfg.class_count)
        entries.append(DatasetEntry((label,), Domain.IMAGE, image=image))
    images = Dataset(entries, cfg.class_count)

    train_count = cfg.video_count - int(round(cfg.video_count * cfg.test_fraction))
    if cfg.video_count > 1:
        train_count = min(max(train_count, 1), cfg.video_count - 1)
    videos = []
    for i in range(cfg.video_count):
        split = "train" if i < train_count else "test"
        primary = (i if split == "train" else i - train_count) % cfg.class_count
        others = [c for c in range(cfg.class_count) if c != primary]
        extra = rng.choice(others, size=cfg.labels_per_video - 1, replace=False) if cfg.labels_per_video > 1 else []
        labels = tuple(sorted({primary, *(int(c) for c in extra)}))
        bases = {label: _place(cfg, rng) for label in labels}

        frames = []
        for k in range(cfg.frames_per_video):
            relevant = not (cfg.irrelevant_frame_rate > 0 and rng.random() < cfg.irrelevant_frame_rate)
            placements = []
            if relevant:
                for label in labels:
                    drift = rng.integers(-1, 2, size=2)
                    placements.append((label, bases[label][0] + int(drift[0]), bases[label][1] + int(drift[1])))
            image = _render(cfg, video_bg, motifs, placements, rng)
            frames.append(Frame(k * cfg.frame_interval, image=image))
        videos.append(VideoRecord(f"video{i:04d}", frames, labels, split))

    logger.info(f"Synthesized {len(images)} images and {len(videos)} videos ({train_count} train) at {cfg.resolution}px")
    return images, videos


def matched_filter_predict(image: Tensor, cfg: SynthConfig, domain: Domain = Domain.IMAGE) -> int:
    """Recover the class of a synthetic image by correlating it with every normalized motif."""
    residual = image - 0.5 * domain_background(cfg, domain)
    motifs = class_motifs(cfg)
    kernels = np.repeat(motifs[:, None], 3, axis=1)
    kernels /= np.sqrt((kernels ** 2).sum(axis=(1, 2, 3), keepdims=True))
    response, _ = layers.conv2d_forward(residual, ConvParams(kernels, np.zeros(cfg.class_count)))
    return int(np.argmax(response.reshape(cfg.class_count, -1).max(axis=1)))


def write_synthetic_corpus(cfg: SynthConfig, directory: PathLike) -> tuple[Path, Path]:
    """Write the synthetic corpus as PPM files plus image and video manifests."""
    from videopipe import Frame, VideoRecord, write_video_manifest

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    images, videos = synth_two_domain(cfg)

    stored = []
    for i, entry in enumerate(images):
        target = directory / "images" / f"img_{i:05d}.ppm"
        save_image(target, entry.image)
        stored.append(DatasetEntry(entry.labels, entry.domain, path=target))
    image_manifest = directory / "images.tsv"
    write_manifest(Dataset(stored, images.class_count), image_manifest)

    stored_videos = []
    for video in videos:
        folder = directory / "videos" / video.id
        folder.mkdir(parents=True, exist_ok=True)
        frames = []
        for k, frame in enumerate(video.frames):
            target = folder / f"frame_{k:04d}.ppm"
            save_image(target, frame.image)
            frames.append(Frame(frame.timestamp, path=target))
        stored_videos.append(VideoRecord(video.id, frames, video.labels, video.split, video.keyframes))
    video_manifest = directory / "videos.tsv"
    label_mode = LabelMode.MULTI if cfg.labels_per_video > 1 else LabelMode.SINGLE
    write_video_manifest(stored_videos, video_manifest, cfg.class_count, label_mode)

    logger.info(f"Wrote synthetic corpus to {directory}")
    return image_manifest, video_manifest
