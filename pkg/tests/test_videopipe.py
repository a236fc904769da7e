import logging
from fractions import Fraction

import numpy as np
import numpy.testing as npt
import pytest

import netspec
import videopipe
from data_io import Domain, ImageLoader, synth_two_domain, write_synthetic_corpus
from layer_registry import HeadSpec
from utils.constants import VIDEO_HEAD
from utils.exceptions import ConfigurationError, EmptyVideoError, ParameterError, ParseError, ShapeError, ValidationError
from videopipe import Frame, VideoRecord


def _video(timestamps, labels=(1,), split="train", keyframes=None):
    frames = [Frame(t, image=np.full((3, 32, 32), i / 10.0)) for i, t in enumerate(timestamps)]
    return VideoRecord("v", frames, labels, split, keyframes)


def _times(frames):
    return [f.timestamp for f in frames]


def test_sample_frames_at_rate():
    video = _video([0.25 * k for k in range(8)])
    assert _times(videopipe.sample_frames(video, 1)) == [0.0, 1.0]
    assert _times(videopipe.sample_frames(video, 2)) == [0.0, 0.5, 1.0, 1.5]
    assert _times(videopipe.sample_frames(video, Fraction(4, 3))) == [0.0, 0.75, 1.5]


def test_one_and_four_fps_give_one_to_four_frame_counts():
    video = _video([0.25 * k for k in range(40)])
    one, four = videopipe.sample_frames(video, 1), videopipe.sample_frames(video, 4)
    assert (len(one), len(four)) == (10, 40)
    assert set(_times(one)) <= set(_times(four))


def test_sample_frames_takes_nearest_earlier_frame():
    video = _video([5.0, 5.3, 5.9, 6.2])
    assert _times(videopipe.sample_frames(video, 1)) == [5.0, 5.9]


def test_sample_frames_never_repeats_a_frame():
    video = _video([0.0, 0.5, 1.0])
    assert _times(videopipe.sample_frames(video, 10)) == [0.0, 0.5, 1.0]
    with pytest.raises(ParameterError):
        videopipe.sample_frames(video, 0)


def test_video_record_validation():
    with pytest.raises(ValidationError):
        _video([0.0, 0.0])
    with pytest.raises(ConfigurationError):
        _video([0.0], split="val")
    with pytest.raises(ValidationError):
        _video([0.0, 1.0], keyframes=(1, 1))
    with pytest.raises(ValidationError):
        _video([0.0, 1.0], keyframes=(2,))


def test_propagated_labels_cover_every_frame():
    video = _video([0.0, 1.0, 2.0], labels=(0, 3))
    entries = videopipe.propagate_labels(video, videopipe.sample_frames(video, 1))
    assert len(entries) == 3
    assert all(e.labels == (0, 3) and e.domain is Domain.VIDEO_FRAME and e.video_id == "v" for e in entries)

    dataset = videopipe.frame_dataset([video, video], 1, HeadSpec(VIDEO_HEAD, 4))
    assert len(dataset) == 6 and dataset.class_count == 4


def test_keyframes_or_one_per_second():
    annotated = _video([0.0, 0.5, 1.0], keyframes=(2, 0))
    assert _times(videopipe.keyframes_for(annotated)) == [1.0, 0.0]
    plain = _video([0.0, 0.5, 1.0, 1.5, 2.0])
    assert _times(videopipe.keyframes_for(plain)) == [0.0, 1.0, 2.0]


def test_fuse_scores_is_mean_and_order_invariant(rng):
    scores = rng.random((7, 5))
    fused = videopipe.fuse_scores(scores)
    npt.assert_allclose(fused, scores.mean(axis=0))
    for _ in range(5):
        assert np.array_equal(videopipe.fuse_scores(scores[rng.permutation(7)]), fused)
    with pytest.raises(ShapeError):
        videopipe.fuse_scores(np.zeros((0, 5)))


def test_predict_video(tiny_spec, rng):
    params = netspec.init_params(tiny_spec, rng, scale=0.1)
    video = _video([0.0, 1.0, 2.0])
    score = videopipe.predict_video(tiny_spec, params, video, VIDEO_HEAD, ImageLoader(32))
    assert score.scores.shape == (4,)
    assert score.scores.sum() == pytest.approx(1.0)

    with pytest.raises(EmptyVideoError):
        videopipe.predict_video(tiny_spec, params, VideoRecord("empty", [], (0,)), VIDEO_HEAD, ImageLoader(32))


def test_evaluate_split(tiny_spec, small_synth, rng, caplog):
    _, videos = synth_two_domain(small_synth)
    params = netspec.init_params(tiny_spec, rng, scale=0.1)
    loader = ImageLoader(32)
    with caplog.at_level(logging.WARNING):
        report = videopipe.evaluate_split(tiny_spec, params, videos, VIDEO_HEAD, loader)
    assert "have no keyframes" in caplog.text
    assert report.sample_count == 4
    assert 0.0 < report.map <= 1.0
    assert report.top1 is not None and report.top5 is None

    threaded = videopipe.evaluate_split(tiny_spec, params, videos, VIDEO_HEAD, loader, workers=3)
    assert threaded.map == report.map

    with pytest.raises(ConfigurationError):
        videopipe.evaluate_split(tiny_spec, params, [v for v in videos if v.split == "train"], VIDEO_HEAD, loader)


def test_video_manifest(small_synth, tmp_path):
    _, manifest = write_synthetic_corpus(small_synth, tmp_path)
    corpus = videopipe.load_video_manifest(manifest)
    assert corpus.class_count == 4
    assert len(corpus.split("train")) == 4 and len(corpus.split("test")) == 4
    assert _times(corpus.videos[0].frames) == [0.0, 0.25, 0.5, 0.75]
    assert corpus.videos[0].frames[0].path.is_file()

    annotated = [VideoRecord(v.id, v.frames, v.labels, v.split, keyframes=(0, 2)) for v in corpus.videos]
    videopipe.write_video_manifest(annotated, tmp_path / "keyed.tsv", corpus.class_count)
    assert videopipe.load_video_manifest(tmp_path / "keyed.tsv").videos[3].keyframes == (0, 2)


def test_video_manifest_errors(tmp_path):
    path = tmp_path / "videos.tsv"
    path.write_text("v1\ttrain\t0\n")
    with pytest.raises(ParseError):
        videopipe.load_video_manifest(path)

    path.write_text("v1\ttrain\t0\t0.0:frame.ppm;bad\n")
    with pytest.raises(ParseError):
        videopipe.load_video_manifest(path, check_files=False)

    path.write_text("v1\ttrain\t0\t0.0:missing.ppm\n")
    with pytest.raises(ValidationError):
        videopipe.load_video_manifest(path)

    path.write_text("# vocabulary: 2\nv1\ttrain\t5\t0.0:missing.ppm\n")
    with pytest.raises(ValidationError):
        videopipe.load_video_manifest(path, check_files=False)
