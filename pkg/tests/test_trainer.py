import math

import numpy as np
import numpy.testing as npt
import pytest

import netspec
import trainer
import videopipe
from data_io import Dataset, DatasetEntry, Domain, ImageLoader, SynthConfig, synth_two_domain
from layer_registry import HeadSpec, Mode
from trainer import Batch, MetricsLog, TrainConfig, TrainingData
from utils.constants import IMAGE_HEAD, VIDEO_HEAD
from utils.exceptions import ConfigurationError, FormatError


def _batch(rng, heads, labels):
    n = len(heads)
    domains = [Domain.IMAGE if h == IMAGE_HEAD else Domain.VIDEO_FRAME for h in heads]
    return Batch(rng.random((n, 3, 28, 28)), list(heads), [tuple(l) for l in labels], domains)


def _in_memory(count, classes, rng, domain=Domain.IMAGE):
    return Dataset([DatasetEntry((i % classes,), domain, image=rng.random((3, 32, 32))) for i in range(count)], classes)


def test_train_config_validation_and_decay():
    cfg = TrainConfig(learning_rate=0.1, lr_decay_step=2, lr_decay_factor=0.5)
    assert [cfg.learning_rate_at(e) for e in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]
    assert TrainConfig().learning_rate_at(7) == TrainConfig().learning_rate
    for bad in ({"learning_rate": 0.0}, {"momentum": 1.0}, {"batch_size": 0}, {"dtype": "float16"}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


def test_sgd_momentum_step_formula(tiny_spec, rng):
    params = netspec.init_params(tiny_spec, rng)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    w0 = params["fc2"].tensors["weight"].copy()
    g = rng.normal(size=w0.shape)
    grads = {"fc2": {"weight": g, "bias": np.zeros(8)}}

    trainer.sgd_momentum_step(params, grads, cfg)
    v1 = -0.1 * (g + 0.01 * w0)
    npt.assert_allclose(params["fc2"].velocity["weight"], v1)
    npt.assert_allclose(params["fc2"].tensors["weight"], w0 + v1)

    trainer.sgd_momentum_step(params, grads, cfg)
    v2 = 0.9 * v1 - 0.1 * (g + 0.01 * (w0 + v1))
    npt.assert_allclose(params["fc2"].tensors["weight"], w0 + v1 + v2)


def test_sgd_skips_frozen_layers(tiny_spec, rng):
    params = netspec.init_params(tiny_spec, rng)
    params.set_frozen("conv1", True)
    before = params.copy()
    grads = {"conv1": {k: np.ones_like(v) for k, v in params["conv1"].tensors.items()}}
    trainer.sgd_momentum_step(params, grads, TrainConfig())
    assert params.equals(before)


def test_augment_eval_is_centre_crop():
    image = np.arange(3 * 32 * 32, dtype=np.float64).reshape(3, 32, 32)
    npt.assert_array_equal(trainer.augment_sample(image, 28, None, Mode.EVAL), image[:, 2:30, 2:30])


def test_augment_train_is_a_window_or_its_mirror(rng):
    image = np.random.default_rng(0).random((3, 32, 32))
    seen_mirror = seen_plain = False
    for _ in range(20):
        crop = trainer.augment_sample(image, 28, rng, Mode.TRAIN)
        assert crop.shape == (3, 28, 28)
        windows = [image[:, t:t + 28, l:l + 28] for t in range(5) for l in range(5)]
        plain = any(np.array_equal(crop, w) for w in windows)
        mirrored = any(np.array_equal(crop, w[:, :, ::-1]) for w in windows)
        assert plain or mirrored
        seen_plain |= plain
        seen_mirror |= mirrored
    assert seen_plain and seen_mirror


def test_mixed_batches_cover_frames_once_and_as_many_images(rng):
    frames = _in_memory(10, 4, rng, Domain.VIDEO_FRAME)
    images = _in_memory(25, 3, rng)
    cfg = TrainConfig(batch_size=6)
    batches = list(trainer.mixed_batch_iterator(images, frames, cfg, rng, loader=ImageLoader(32), crop_resolution=28))

    heads = [h for b in batches for h in b.heads]
    assert heads.count(VIDEO_HEAD) == 10
    assert heads.count(IMAGE_HEAD) == 10
    assert [len(b) for b in batches] == [6, 6, 6, 2]
    assert batches[0].inputs.shape[1:] == (3, 28, 28)


def test_mixed_batches_need_frames(rng):
    with pytest.raises(ConfigurationError):
        next(trainer.mixed_batch_iterator(None, Dataset([], 4), TrainConfig(), rng,
                                          loader=ImageLoader(32), crop_resolution=28))


def test_mixed_gradient_is_sum_of_per_domain_gradients(two_head_spec, rng):
    params = netspec.init_params(two_head_spec, rng, scale=0.1)
    heads = [VIDEO_HEAD, IMAGE_HEAD, VIDEO_HEAD, IMAGE_HEAD, VIDEO_HEAD]
    labels = [(0,), (2,), (3,), (1,), (1,)]
    mixed = _batch(rng, heads, labels)

    combined = trainer.compute_gradients(two_head_spec, params, mixed, Mode.EVAL)
    parts = []
    for head in (VIDEO_HEAD, IMAGE_HEAD):
        idx = mixed.indices_for(head)
        sub = Batch(mixed.inputs[idx], [head] * len(idx), [labels[i] for i in idx], [mixed.domains[i] for i in idx])
        parts.append(trainer.compute_gradients(two_head_spec, params, sub, Mode.EVAL, normalizer=len(mixed)))

    for layer in ("conv1", "conv2", "fc1", "fc2"):
        for key in ("weight", "bias"):
            npt.assert_allclose(combined.grads[layer][key], parts[0].grads[layer][key] + parts[1].grads[layer][key],
                                atol=1e-12)
    npt.assert_allclose(combined.grads["head:video"]["weight"], parts[0].grads["head:video"]["weight"], atol=1e-12)
    npt.assert_allclose(combined.grads["head:image"]["weight"], parts[1].grads["head:image"]["weight"], atol=1e-12)
    assert combined.counts == {VIDEO_HEAD: 3, IMAGE_HEAD: 2}


def test_head_without_samples_is_untouched(two_head_spec, rng):
    params = netspec.init_params(two_head_spec, rng, scale=0.1)
    before = params.copy()
    batch = _batch(rng, [VIDEO_HEAD] * 3, [(0,), (1,), (2,)])
    losses, params = trainer.multi_head_step(two_head_spec, params, batch, TrainConfig(), rng)

    assert set(losses) == {VIDEO_HEAD}
    for key in ("weight", "bias"):
        npt.assert_array_equal(params["head:image"].tensors[key], before["head:image"].tensors[key])
    assert not np.array_equal(params["head:video"].tensors["weight"], before["head:video"].tensors["weight"])


def test_gradients_match_finite_differences(tiny_spec, rng):
    params = netspec.init_params(tiny_spec, rng, scale=0.2)
    batch = _batch(rng, [VIDEO_HEAD] * 3, [(0,), (3,), (1,)])
    analytic = trainer.compute_gradients(tiny_spec, params, batch, Mode.EVAL).grads

    def loss():
        return trainer.compute_gradients(tiny_spec, params, batch, Mode.EVAL).losses[VIDEO_HEAD]

    step = 1e-6
    for layer, key, index in (("conv1", "bias", (0,)), ("fc1", "bias", (3,)), ("head:video", "weight", (1, 2))):
        tensor = params[layer].tensors[key]
        original = tensor[index]
        tensor[index] = original + step
        plus = loss()
        tensor[index] = original - step
        minus = loss()
        tensor[index] = original
        assert analytic[layer][key][index] == pytest.approx((plus - minus) / (2 * step), rel=1e-4, abs=1e-9)


def test_repeated_steps_reduce_loss(rng):
    spec = netspec.build_linear_baseline(32, [HeadSpec(VIDEO_HEAD, 3)])
    params = netspec.init_params(spec, rng)
    batch = _batch(rng, [VIDEO_HEAD] * 6, [(i % 3,) for i in range(6)])
    cfg = TrainConfig(learning_rate=1e-4, weight_decay=0.0)

    first, _ = trainer.multi_head_step(spec, params, batch, cfg, rng)
    for _ in range(20):
        last, params = trainer.multi_head_step(spec, params, batch, cfg, rng)
    assert last[VIDEO_HEAD] < first[VIDEO_HEAD]


def _training_data(small_synth):
    images, videos = synth_two_domain(small_synth)
    head = HeadSpec(VIDEO_HEAD, small_synth.class_count)
    train_videos = [v for v in videos if v.split == "train"]
    test_videos = [v for v in videos if v.split == "test"]
    return images, TrainingData(primary=videopipe.frame_dataset(train_videos, 2, head), loader=ImageLoader(32),
                                heldout=videopipe.frame_dataset(test_videos, 2, head))


def test_train_zero_epochs_returns_inputs(tiny_spec, small_synth, rng):
    _, data = _training_data(small_synth)
    params = netspec.init_params(tiny_spec, rng)
    trained, history = trainer.train(tiny_spec, params, data, TrainConfig(epochs=0), progress=False)
    assert trained is params
    assert history.records == []


def test_train_records_and_is_deterministic(build_tiny, small_synth, tmp_path):
    spec = build_tiny(heads=[HeadSpec(VIDEO_HEAD, 4), HeadSpec(IMAGE_HEAD, 4)])
    images, data = _training_data(small_synth)
    data.auxiliary = images
    cfg = TrainConfig(epochs=2, batch_size=8, seed=5)
    log = MetricsLog(tmp_path / "metrics.csv")

    init = netspec.init_params(spec, np.random.default_rng(0))
    first, history = trainer.train(spec, init, data, cfg, log, progress=False)
    second, _ = trainer.train(spec, init, data, cfg, progress=False)

    assert first.equals(second)
    assert not first.equals(init)
    assert [(r.epoch, r.head) for r in history.records] == [(1, IMAGE_HEAD), (1, VIDEO_HEAD),
                                                            (2, IMAGE_HEAD), (2, VIDEO_HEAD)]
    video = history.last(VIDEO_HEAD)
    assert math.isfinite(video.heldout_loss) and 0.0 <= video.heldout_metric <= 1.0
    assert math.isnan(history.last(IMAGE_HEAD).heldout_loss)

    frame = MetricsLog.read(log.path)
    assert len(frame) == 4
    assert list(frame["head"]) == [IMAGE_HEAD, VIDEO_HEAD, IMAGE_HEAD, VIDEO_HEAD]


def test_float32_training_and_mean_subtraction(tiny_spec, small_synth, rng):
    _, data = _training_data(small_synth)
    cfg = TrainConfig(epochs=1, batch_size=8, dtype="float32", mean_subtraction=True)
    params, history = trainer.train(tiny_spec, netspec.init_params(tiny_spec, rng), data, cfg, progress=False)
    assert params["conv1"].tensors["weight"].dtype == np.float32
    assert history.mean_image.shape == (3, 28, 28)


def test_metrics_log_rejects_foreign_csv(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        MetricsLog.read(path)


def _train_heldout_gap(seed, train_size, epochs):
    """Final eval-mode (train loss, held-out loss) on weakly labelled synthetic images."""
    cfg = SynthConfig(seed=200 + seed, class_count=4, image_domain_size=600, video_count=1, label_noise=0.15, jitter=8)
    images, _ = synth_two_domain(cfg)
    train_ds, heldout = images.subset(range(train_size)), images.subset(range(400, 600))
    spec = netspec.build_architecture(2, 32, [HeadSpec(IMAGE_HEAD, 4)], fc1_width=128, fc2_width=32,
                                      width_multiplier=0.25, dropout_rate=0.0)
    loader = ImageLoader(32)
    train_cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0, epochs=epochs, batch_size=10, seed=seed)
    data = TrainingData(primary=train_ds, loader=loader, primary_head=IMAGE_HEAD)
    params, _ = trainer.train(spec, netspec.init_params(spec, np.random.default_rng(seed)), data, train_cfg,
                              progress=False)
    final = [trainer.evaluate_dataset(spec, params, ds, IMAGE_HEAD, loader).loss for ds in (train_ds, heldout)]
    return tuple(final)


@pytest.mark.slow
def test_small_training_set_overfits_and_full_set_does_not():
    outcomes = []
    for seed in range(5):
        small_train, small_heldout = _train_heldout_gap(seed, train_size=50, epochs=300)
        full_train, full_heldout = _train_heldout_gap(seed, train_size=400, epochs=8)
        outcomes.append(small_train < 0.5 * small_heldout and full_heldout < 2.0 * full_train)
    assert sum(outcomes) >= 4, outcomes
