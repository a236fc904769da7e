import matplotlib

matplotlib.use("Agg")

import numpy as np
import pandas as pd

from PIL import Image
from io import BytesIO
from matplotlib import pyplot as plt


def _figure_to_image(fig) -> Image.Image:

    # Save the figure to a BytesIO buffer and convert to bytes
    buf = BytesIO()
    fig.savefig(buf, format='png', dpi=150, bbox_inches='tight')
    buf.seek(0)
    img_data = buf.getvalue()
    plt.close(fig)
    buf.close()

    # Create new image from the raw bytes
    img = Image.open(BytesIO(img_data))
    img.load()
    return img


def create_loss_curves(metrics: pd.DataFrame, title: str = "Training curves") -> Image.Image:
    """Train and held-out loss per epoch, one colour per head."""

    fig, ax = plt.subplots(figsize=(8, 4.5))
    fig.suptitle(title, size=14)

    colors = matplotlib.colormaps['tab10']
    for i, (head, rows) in enumerate(metrics.groupby('head', sort=True)):
        rows = rows.sort_values('epoch')
        ax.plot(rows['epoch'], rows['train_loss'], color=colors(i), linestyle='-', marker='o', label=f'{head} train')
        if rows['heldout_loss'].notna().any():
            ax.plot(rows['epoch'], rows['heldout_loss'], color=colors(i), linestyle='--', marker='s', label=f'{head} held-out')

    ax.set_xlabel('Epoch')
    ax.set_ylabel('Loss')
    ax.grid(alpha=0.3)
    ax.legend()
    return _figure_to_image(fig)


def create_kernel_mosaic(kernels: np.ndarray, title: str = "First-layer kernels") -> Image.Image:
    """Grid of [K, C, N_W, N_W] kernels, each min-max scaled to [0, 1] on its own."""

    count = kernels.shape[0]
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))

    fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.8, rows * 0.8 + 0.5), squeeze=False)
    fig.suptitle(title, size=10)

    for idx, ax in enumerate(axes.flat):
        ax.axis('off')
        if idx >= count:
            continue
        kernel = kernels[idx]
        span = kernel.max() - kernel.min()
        scaled = (kernel - kernel.min()) / span if span > 0 else np.zeros_like(kernel)
        if scaled.shape[0] == 3:
            ax.imshow(scaled.transpose(1, 2, 0), interpolation='nearest')
        else:
            ax.imshow(scaled.mean(axis=0), cmap='gray', interpolation='nearest')

    return _figure_to_image(fig)
