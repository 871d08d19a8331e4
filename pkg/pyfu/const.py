"""Constants for the PyFu lidar-camera fusion package."""

from logging import Logger, getLogger

LOGGER: Logger = getLogger(__package__)

DOMAIN = "pyfu"
VERSION = "0.1.0"

IGNORE_LABEL = 255
NORM_EPSILON = 1e-5
LEAKY_SLOPE = 0.01
NORM_MOMENTUM = 0.1

DEFAULT_SENSOR_HEIGHT = 64
DEFAULT_SENSOR_WIDTH = 2048
DEFAULT_FOV_UP = 3.0
DEFAULT_FOV_DOWN = -25.0

# (range, x, y, z, remission)
RANGE_CHANNEL_MEANS = (12.12, 10.88, 0.23, -1.04, 0.21)
RANGE_CHANNEL_STDS = (12.32, 11.47, 6.91, 0.86, 0.16)
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25

# Stage strides (rows, columns) of the lidar encoder; downsampling in the
# first two stages is horizontal only.
LIDAR_STAGE_STRIDES = ((1, 2), (1, 2), (2, 2), (2, 2), (2, 2), (1, 1))
LIDAR_TAP_STAGES = (2, 3, 5)
LIDAR_TAP_STRIDES = ((2, 8), (4, 16), (8, 32))
LIDAR_DECODER_STRIDE = (2, 8)
CAMERA_STAGE_COUNT = 4
CAMERA_DIVISOR = 32

DEFAULT_CHANNELS = 128
DEFAULT_EXPANSION = 6
DEFAULT_BOTTLENECK_RATIO = 4
DEFAULT_DPC_DILATIONS = ((1, 6), (1, 1), (6, 21), (18, 15), (6, 3))

STRATEGY_BOTTLENECK = "brb+bb"
STRATEGY_INVERTED = "irb"
STRATEGY_DOUBLE_INVERTED = "2irb"
FUSION_STRATEGIES = (STRATEGY_BOTTLENECK, STRATEGY_INVERTED, STRATEGY_DOUBLE_INVERTED)

LATE_FUSION_CAMERA_FIRST = "camera-first"
LATE_FUSION_LIDAR_FIRST = "lidar-first"
COMBINE_SUM = "sum"
COMBINE_CONCAT = "concat"

PRESET_BASELINE = "baseline"
PRESET_LATE_FUSION = "lf"
PRESET_PFB = "pfb"
PRESET_PFB_PFH = "pfb-pfh"
PRESETS = (PRESET_BASELINE, PRESET_LATE_FUSION, PRESET_PFB, PRESET_PFB_PFH)

DEFAULT_BASE_LR = 0.07
DEFAULT_POLY_POWER = 0.9
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_MOMENTUM = 0.9
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8

DEFAULT_KNN_WINDOW = 5
DEFAULT_KNN_K = 5
DEFAULT_KNN_CUTOFF = 1.0
DEFAULT_KNN_SIGMA = 1.0

CHECKPOINT_MAGIC = b"PYFU1"
LABEL_CLASS_MASK = 0xFFFF
SCAN_RECORD_BYTES = 16

SYNTHETIC_CLASSES = ("ground", "wall", "box", "cylinder", "crate_red", "crate_blue")
SYNTHETIC_PALETTE = (
    (0.45, 0.42, 0.40),
    (0.70, 0.65, 0.55),
    (0.20, 0.55, 0.25),
    (0.85, 0.75, 0.20),
    (0.85, 0.15, 0.15),
    (0.15, 0.25, 0.85),
)
SYNTHETIC_AMBIGUOUS_PAIR = (4, 5)
SKY_COLOR = (0.60, 0.75, 0.95)

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_USAGE_ERROR = 2
