"""Constants for glyphnet.

This file holds training defaults, model defaults, file names and the
checkpoint format identifiers shared by the CLI and the library.
"""

from __future__ import annotations

# Package key (must match the distribution and the package folder name)
DOMAIN = "glyphnet"

# Model kinds
MODEL_A = "A"
MODEL_B = "B"
MODEL_C = "C"
MODEL_KINDS = (MODEL_A, MODEL_B, MODEL_C)

# ----------------------------- Tensor core --------------------------------
PADDING_SAME = "same"
PADDING_VALID = "valid"
POOL_MAX = "max"
POOL_AVG = "avg"

# ----------------------------- Layers -------------------------------------
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

# Lower clamp applied to probabilities before taking the log.
PROB_FLOOR = 1e-12

# ----------------------------- Training -----------------------------------
DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 64
DEFAULT_DROP_RATE = 0.5
DEFAULT_EPOCH_DROP = 5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Initial learning rate per model kind.
DEFAULT_LR0: dict[str, float] = {MODEL_A: 0.0005, MODEL_B: 0.0005, MODEL_C: 0.001}

TOP_K = 3

# ----------------------------- Data ---------------------------------------
DEFAULT_IMAGE_SIZE = 32
DEFAULT_TRAIN_FRAC = 0.8
IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg", ".pgm", ".bmp"})
PRESPLIT_TRAIN_DIR = "train"
PRESPLIT_TEST_DIR = "test"

AUG_ROTATION_DEG = 10.0
AUG_SHEAR_FRAC = 0.10
AUG_ZOOM_FRAC = 0.10
AUG_SHIFT_FRAC = 0.10

# ----------------------------- Checkpoint ---------------------------------
CHECKPOINT_MAGIC = b"GNET"
CHECKPOINT_VERSION = 1
CHECKPOINT_DTYPE = "<f4"

# ----------------------------- Artifacts ----------------------------------
METRICS_FILE = "metrics.json"
PER_CLASS_FILE = "per_class.csv"
CURVES_FILE = "curves.csv"
CONFUSION_FILE = "confusion_matrix.csv"
CHECKPOINT_SUFFIX = ".ckpt"

# ----------------------------- Run configuration --------------------------
# Keys accepted in a JSON config file and mirrored by CLI flags.
CONF_MODEL = "model"
CONF_AUGMENT = "augment"
CONF_EPOCHS = "epochs"
CONF_BATCH_SIZE = "batch_size"
CONF_LR0 = "lr0"
CONF_DROP_RATE = "drop_rate"
CONF_EPOCH_DROP = "epoch_drop"
CONF_SEED = "seed"
CONF_CORPUS = "corpus"
CONF_OUT = "out"
CONF_IMAGE_SIZE = "image_size"
CONF_TRAIN_FRAC = "train_frac"
CONF_ENSEMBLE = "ensemble"
CONF_WORKERS = "workers"
CONF_ROTATION_DEG = "rotation_deg"
CONF_SHEAR_FRAC = "shear_frac"
CONF_ZOOM_FRAC = "zoom_frac"
CONF_SHIFT_FRAC = "shift_frac"

MIN_IMAGE_SIZE = 4
MAX_IMAGE_SIZE = 512
