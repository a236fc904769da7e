import numpy as np
import numpy.testing as npt

import gradcheck
import layers


def test_suite_passes_for_every_layer_and_loss(rng):
    results = gradcheck.gradient_check_suite(rng)
    names = {r.name for r in results}
    assert names == {"conv", "conv_strided", "maxpool", "relu", "fc", "dropout", "softmax_xent", "sigmoid_bce"}
    for result in results:
        assert result.passed, f"{result.name}: {result.max_relative_error:.3e}"


def test_faulty_conv_backward_is_caught(rng):
    def flipped(context, upstream):
        dx, grads = layers.backward(context, upstream)
        return -dx, {key: -value for key, value in grads.items()}

    results = {r.name: r for r in gradcheck.gradient_check_suite(rng, backward_overrides={"conv": flipped})}
    assert not results["conv"].passed
    assert results["conv_strided"].passed
    assert results["fc"].passed


def test_numeric_gradient_of_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    grad = gradcheck.numeric_gradient(lambda: float(np.sum(x ** 2)), x)
    npt.assert_allclose(grad, 2.0 * x, rtol=1e-8)
    # perturbations are undone
    npt.assert_array_equal(x, [[1.0, -2.0], [0.5, 3.0]])


def test_relative_error_is_symmetric_and_bounded():
    a, b = np.array([1.0, 2.0]), np.array([1.0, 2.2])
    assert gradcheck.relative_error(a, b) == gradcheck.relative_error(b, a)
    assert gradcheck.relative_error(a, a) == 0.0
    assert gradcheck.relative_error(a, -a) == 1.0
