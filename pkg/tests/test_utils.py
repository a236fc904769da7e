import numpy as np
import pandas as pd
import pytest

from utils.parser_utils import (
    format_labels,
    format_table,
    parse_config_info,
    parse_float_list,
    parse_int_list,
    parse_labels,
)
from utils.plot_utils import create_kernel_mosaic, create_loss_curves


def test_parse_labels():
    assert parse_labels("3;7") == (3, 7)
    assert parse_labels(" 2 ; 2 ;5") == (2, 5)
    assert format_labels((3, 7)) == "3;7"
    for bad in ("", ";", "a;1", "1.5"):
        with pytest.raises(ValueError):
            parse_labels(bad)


def test_parse_lists():
    assert parse_int_list("32, 64,") == [32, 64]
    assert parse_float_list("0.5,1") == [0.5, 1.0]


def test_parse_config_info_is_sorted():
    assert parse_config_info({"b": 2, "a": 1}, "Run") == "Run:\na: 1\nb: 2"


def test_format_table():
    frame = pd.DataFrame({"depth": [2, 3], "map": [0.51234, np.nan]})
    text = format_table(frame)
    assert "0.5123" in text and "-" in text
    assert format_table(pd.DataFrame()) == "(no rows)"


def test_loss_curves_image():
    frame = pd.DataFrame({"epoch": [1, 2, 1, 2], "head": ["video", "video", "image", "image"],
                          "train_loss": [1.0, 0.8, 1.2, 0.9], "heldout_loss": [1.1, 0.9, np.nan, np.nan],
                          "heldout_metric": [0.3, 0.4, np.nan, np.nan]})
    image = create_loss_curves(frame)
    assert image.size[0] > 100 and image.size[1] > 100


def test_kernel_mosaic_image():
    kernels = np.random.default_rng(0).normal(size=(10, 3, 5, 5))
    image = create_kernel_mosaic(kernels)
    assert image.size[0] > 0
    single_channel = create_kernel_mosaic(np.zeros((3, 2, 3, 3)))
    assert single_channel.size[1] > 0
