import json
from pathlib import Path

ASSETS_DIR = Path(__file__).resolve().parent.parent / "assets"

# Input resolution -> training crop resolution
CROP_RESOLUTION: dict[int, int] = {256: 227, 128: 116, 64: 56, 32: 28}
SUPPORTED_RESOLUTIONS = sorted(CROP_RESOLUTION)
SUPPORTED_DEPTHS = [2, 3, 4, 5]

# Load in the conv layer table: depth -> resolution -> [kernels, width, stride, pool_after]
_raw_architectures = json.load(open(ASSETS_DIR / "architectures.json"))
ARCHITECTURES: dict[int, dict[int, list[tuple[int, int, int, bool]]]] = {
    int(depth): {int(res): [tuple(layer) for layer in layers] for res, layers in table.items()}
    for depth, table in _raw_architectures.items()
    if not depth.startswith("_")
}

# Network defaults
FC1_WIDTH = 4096
FC2_WIDTH_FLICKR = 1024
FC2_WIDTH_ILSVRC = 2048
DROPOUT_RATE = 0.5
POOL_SIZE = 2
POOL_STRIDE = 2
INIT_SCALE = 0.01

# Training defaults
LEARNING_RATE = 0.01
MOMENTUM = 0.9
WEIGHT_DECAY = 0.0005
BATCH_SIZE = 32
EPOCHS = 10
LR_DECAY_FACTOR = 0.1

# Video defaults
TRAIN_FPS = 1.0
KEYFRAME_FPS = 1.0

# Head names used when a run does not name its own
IMAGE_HEAD = "image"
VIDEO_HEAD = "video"

# Binary formats
TENSOR_MAGIC = b"DCNT"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"DCNCKPT\x00"
CHECKPOINT_VERSION = 1

# Gradient checking
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4

# Logging
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# Environment variables read through python-dotenv
ENV_OUT_DIR = "DCN_OUT_DIR"
ENV_LOG_LEVEL = "DCN_LOG_LEVEL"
ENV_WORKERS = "DCN_WORKERS"
DEFAULT_OUT_DIR = "runs"

METRICS_LOG_COLUMNS = ["epoch", "head", "train_loss", "heldout_loss", "heldout_metric"]
RESULTS_TABLE_COLUMNS = ["depth", "init", "training_set", "update_policy", "map"]

CLI_DESCRIPTION = """
Deep convolution networks for frame-based video recognition.

Commands:
- synth       write a seeded synthetic image + video corpus
- pretrain    train a network on an image manifest from random initialization
- transfer    initialize from a checkpoint (or randomly) and fine-tune on video frames
- eval        late-fusion video evaluation (MAP / top-k)
- sweep       resolution x depth x training-size x cycles x fps study
- gradcheck   finite-difference gradient suite
- report      metrics-log tables, loss curves and first-layer kernel mosaics
- describe    print an architecture with shapes and parameter counts
"""
