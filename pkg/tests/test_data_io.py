from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

import data_io
from data_io import Dataset, DatasetEntry, Domain, ImageLoader, SynthConfig
from layer_registry import LabelMode
from utils.exceptions import ConfigurationError, FormatError, ParseError, ValidationError


def _write_image(path, value=0.5):
    data_io.save_image(path, np.full((3, 4, 4), value))
    return path


def test_bilinear_upscale():
    image = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    resized = data_io.resize_image(image, 4)
    expected = [[0.0, 0.25, 0.75, 1.0],
                [0.25, 0.375, 0.625, 0.75],
                [0.75, 0.625, 0.375, 0.25],
                [1.0, 0.75, 0.25, 0.0]]
    npt.assert_allclose(resized[0], expected, atol=1e-6)


def test_resize_keeps_dtype_within_float32_precision():
    image = np.full((2, 3, 3), 1.0 / 3.0)
    resized = data_io.resize_image(image, 7)
    assert resized.dtype == np.float64
    # resampling runs in float32
    npt.assert_allclose(resized, 1.0 / 3.0, rtol=1e-6)
    assert data_io.resize_image(image.astype(np.float32), 7).dtype == np.float32


def test_resize_keeps_matching_images():
    image = np.random.default_rng(0).random((3, 8, 8))
    assert data_io.resize_image(image, 8) is image


def test_ppm_save_and_load(tmp_path):
    image = np.random.default_rng(0).random((3, 6, 6))
    path = tmp_path / "frame.ppm"
    data_io.save_image(path, image)
    loaded = data_io.load_image(path, 32)
    assert loaded.shape == (3, 32, 32)
    assert loaded.min() >= 0.0 and loaded.max() <= 1.0

    raw = tmp_path / "frame.dcnt"
    data_io.save_image(raw, image)
    npt.assert_allclose(data_io.load_image(raw, 32), data_io.resize_image(image, 32))


def test_load_image_rejects_unknown_or_broken_files(tmp_path):
    with pytest.raises(FormatError):
        data_io.load_image(tmp_path / "x.png", 32)
    broken = tmp_path / "broken.ppm"
    broken.write_bytes(b"not an image")
    with pytest.raises(FormatError):
        data_io.load_image(broken, 32)


def test_manifest_parsing(tmp_path):
    for name in ("a.ppm", "b.ppm", "c.ppm"):
        _write_image(tmp_path / name)
    manifest = tmp_path / "images.tsv"
    manifest.write_text("# vocabulary: 5\na.ppm\t0\nb.ppm\t3;1\timage\n\nc.ppm\t4\tvideo_frame\n")

    dataset = data_io.load_manifest(manifest)
    assert len(dataset) == 3
    assert dataset.class_count == 5
    assert dataset.label_mode is LabelMode.MULTI
    assert dataset[1].labels == (3, 1)
    assert dataset[2].domain is Domain.VIDEO_FRAME
    assert dataset[0].path == tmp_path / "a.ppm"


def test_manifest_errors_name_the_line(tmp_path):
    _write_image(tmp_path / "a.ppm")
    manifest = tmp_path / "images.tsv"

    manifest.write_text("a.ppm\t0\nno-tab-here\n")
    with pytest.raises(ParseError) as info:
        data_io.load_manifest(manifest)
    assert info.value.line_number == 2

    manifest.write_text("a.ppm\tx\n")
    with pytest.raises(ParseError):
        data_io.load_manifest(manifest)

    manifest.write_text("# vocabulary: 2\na.ppm\t2\n")
    with pytest.raises(ValidationError):
        data_io.load_manifest(manifest)

    manifest.write_text("missing.ppm\t0\n")
    with pytest.raises(ValidationError):
        data_io.load_manifest(manifest)
    assert len(data_io.load_manifest(manifest, class_count=2, check_files=False)) == 1


def test_written_manifest_reloads(tmp_path):
    (tmp_path / "img").mkdir()
    paths = [_write_image(tmp_path / "img" / f"{i}.ppm") for i in range(2)]
    dataset = Dataset([DatasetEntry((i,), path=p) for i, p in enumerate(paths)], 3)
    data_io.write_manifest(dataset, tmp_path / "m.tsv")
    reloaded = data_io.load_manifest(tmp_path / "m.tsv")
    assert reloaded.class_count == 3
    assert reloaded.label_sets() == [(0,), (1,)]
    assert [e.path for e in reloaded] == paths


def test_dataset_validates_labels():
    with pytest.raises(ValidationError):
        Dataset([DatasetEntry((3,), image=np.zeros((3, 2, 2)))], 3)
    with pytest.raises(ConfigurationError):
        DatasetEntry((0,))


def test_split_dataset(rng):
    dataset = Dataset([DatasetEntry((i % 2,), image=np.zeros((3, 2, 2))) for i in range(10)], 2)
    train, heldout = data_io.split_dataset(dataset, 0.3, rng)
    assert (len(train), len(heldout)) == (7, 3)
    assert heldout.split == "heldout"
    assert {id(e) for e in train} | {id(e) for e in heldout} == {id(e) for e in dataset}

    train, heldout = data_io.split_dataset(dataset, 0.0, rng)
    assert len(heldout) == 0
    with pytest.raises(ConfigurationError):
        data_io.split_dataset(dataset, 1.0, rng)


def test_image_loader_caches_decoded_files(tmp_path):
    entry = DatasetEntry((0,), path=_write_image(tmp_path / "a.ppm", 0.2))
    loader = ImageLoader(32)
    first = loader.load(entry)
    assert loader.load(entry) is first
    assert first.shape == (3, 32, 32)
    with pytest.raises(ConfigurationError):
        ImageLoader(48)


def test_synthetic_corpus_is_seeded(small_synth):
    images_a, videos_a = data_io.synth_two_domain(small_synth)
    images_b, videos_b = data_io.synth_two_domain(small_synth)
    for a, b in zip(images_a, images_b):
        npt.assert_array_equal(a.image, b.image)
    assert [v.labels for v in videos_a] == [v.labels for v in videos_b]

    other, _ = data_io.synth_two_domain(replace(small_synth, seed=4))
    assert not np.array_equal(other[0].image, images_a[0].image)


def test_synthetic_corpus_layout(small_synth):
    images, videos = data_io.synth_two_domain(small_synth)
    assert len(images) == 16
    assert np.bincount([e.labels[0] for e in images]).tolist() == [4, 4, 4, 4]
    assert all(e.image.shape == (3, 32, 32) and e.image.min() >= 0 and e.image.max() <= 1 for e in images)

    assert len(videos) == 8
    assert {v.split for v in videos} == {"train", "test"}
    assert [f.timestamp for f in videos[0].frames] == [0.0, 0.25, 0.5, 0.75]
    assert sorted(v.labels[0] for v in videos if v.split == "test") == [0, 1, 2, 3]


def test_synthetic_classes_are_separable():
    cfg = SynthConfig(seed=7, class_count=4, image_domain_size=12, video_count=4, frames_per_video=2, noise=0.0)
    images, videos = data_io.synth_two_domain(cfg)
    for entry in images:
        assert data_io.matched_filter_predict(entry.image, cfg, Domain.IMAGE) == entry.labels[0]
    for video in videos:
        for frame in video.frames:
            assert data_io.matched_filter_predict(frame.image, cfg, Domain.VIDEO_FRAME) == video.labels[0]


def test_domains_differ_in_background():
    cfg = SynthConfig()
    image_bg = data_io.domain_background(cfg, Domain.IMAGE)
    video_bg = data_io.domain_background(cfg, Domain.VIDEO_FRAME)
    assert image_bg.shape == video_bg.shape == (3, 32, 32)
    assert np.abs(image_bg - video_bg).mean() > 0.1


def test_multi_label_videos():
    cfg = SynthConfig(class_count=5, image_domain_size=5, video_count=4, labels_per_video=2)
    _, videos = data_io.synth_two_domain(cfg)
    assert all(len(v.labels) == 2 for v in videos)


def test_synth_config_validation():
    with pytest.raises(ConfigurationError):
        SynthConfig(resolution=48)
    with pytest.raises(ConfigurationError):
        SynthConfig(class_count=2, labels_per_video=3)
    with pytest.raises(ConfigurationError):
        SynthConfig(label_noise=1.0)


def test_write_synthetic_corpus(small_synth, tmp_path):
    from videopipe import load_video_manifest

    image_manifest, video_manifest = data_io.write_synthetic_corpus(small_synth, tmp_path)
    images = data_io.load_manifest(image_manifest)
    corpus = load_video_manifest(video_manifest)
    assert len(images) == 16 and images.class_count == 4
    assert len(corpus.videos) == 8 and corpus.class_count == 4
    assert len(corpus.videos[0].frames) == 4
    assert (tmp_path / "videos" / "video0000" / "frame_0000.ppm").is_file()
