import os

# Plane axis pairs; the letters index (x, y, z, t) = (0, 1, 2, 3)
AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}

AXIS_PAIR_XY = "xy"
AXIS_PAIR_XZ = "xz"
AXIS_PAIR_YZ = "yz"
AXIS_PAIR_XT = "xt"
AXIS_PAIR_YT = "yt"
AXIS_PAIR_ZT = "zt"

SPATIAL_AXIS_PAIRS = [AXIS_PAIR_XY, AXIS_PAIR_XZ, AXIS_PAIR_YZ]
TEMPORAL_AXIS_PAIRS = [AXIS_PAIR_XT, AXIS_PAIR_YT, AXIS_PAIR_ZT]
ALL_AXIS_PAIRS = SPATIAL_AXIS_PAIRS + TEMPORAL_AXIS_PAIRS

FIELD_MODE_STOCK = "stock"
FIELD_MODE_EXTENDED = "extended"
FIELD_MODE_SPATIAL_ONLY = "spatial_only"

FIELD_MODES = [FIELD_MODE_STOCK, FIELD_MODE_EXTENDED, FIELD_MODE_SPATIAL_ONLY]

# Plane groups: "field" holds the single plane set of stock/spatial_only stacks
PLANE_GROUP_FIELD = "field"
PLANE_GROUP_STATIC = "static"
PLANE_GROUP_DYNAMIC = "dynamic"

PLANE_INIT_LOW = 0.9
PLANE_INIT_HIGH = 1.1
MASK_CHANNEL_INIT = 0.0

# Plane stack defaults
FEATURE_DIM_DEFAULT = 32
BASE_RESOLUTION_XY_DEFAULT = 128
SCALE_MULTIPLIERS_DEFAULT = [1, 2, 4]

# Decoder defaults
DECODER_HIDDEN_DEFAULT = 64
DIRECTION_FREQUENCIES = 4
DIRECTION_ENCODING_DIM = 3 + 3 * 2 * DIRECTION_FREQUENCIES
ACTIVATION_RELU = "relu"
ACTIVATION_SOFTPLUS = "softplus"
ACTIVATIONS = [ACTIVATION_RELU, ACTIVATION_SOFTPLUS]
DENSITY_BIAS_DEFAULT = 0.0

# Rendering defaults
SAMPLES_TRAIN_DEFAULT = 128
SAMPLES_EVAL_DEFAULT = 192
DEPTH_EPSILON = 1e-6
RENDER_CHUNK_DEFAULT = 4096
BACKGROUND_DEFAULT = (0.0, 0.0, 0.0)

# Loss weight defaults
LOSS_PHOTOMETRIC_DEFAULT = 1.0
LOSS_COSINE_SEP_DEFAULT = 1e-3
LOSS_MASK_BCE_DEFAULT = 1e-2
LOSS_TV_SPATIAL_DEFAULT = 2e-4
LOSS_TV_TEMPORAL_DEFAULT = 1e-3
COSINE_EPSILON = 1e-12
BCE_EPSILON = 1e-7

LOSS_TERM_PHOTOMETRIC = "photometric"
LOSS_TERM_COSINE_SEP = "cosine_sep"
LOSS_TERM_MASK_BCE = "mask_bce"
LOSS_TERM_TV_SPATIAL = "tv_spatial"
LOSS_TERM_TV_TEMPORAL = "tv_temporal"

# Optimizer defaults
LEARNING_RATE_DEFAULT = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
LR_FINAL_RATIO_DEFAULT = 0.1
BATCH_SIZE_DEFAULT = 1024

PSNR_CAP = 99.0
GRADIENT_CHECK_STEP = 1e-4
GRADIENT_CHECK_FLOOR = 1e-8

# Geometry tolerances
ROTATION_TOLERANCE = 1e-9
MANIFEST_ROTATION_TOLERANCE = 1e-6
DIRECTION_TOLERANCE = 1e-9
ANTIPODAL_TOLERANCE = 1e-9

# Pose sampling
REQUEST_TAG_STATIC = "static_novel"
REQUEST_TAG_DYN_T = "dyn_t"
REQUEST_TAG_DYN_T_MINUS = "dyn_t_minus"
REQUEST_TAG_DYN_T_PLUS = "dyn_t_plus"

REQUEST_TAGS = [REQUEST_TAG_STATIC,
                REQUEST_TAG_DYN_T,
                REQUEST_TAG_DYN_T_MINUS,
                REQUEST_TAG_DYN_T_PLUS]

TRAJECTORY_SUBDIVISIONS_DEFAULT = 4

# Annotation defaults (8-bit scale for color distances)
PALETTE_MIN_SEPARATION = 60
MASK_THRESHOLD_DEFAULT = 0.3
COLOR_TOLERANCE_DEFAULT = 80
MIN_AREA_DEFAULT = 4
BACKGROUND_LABEL = -1
PALETTE_LEVELS = [0, 64, 128, 192, 255]

# On-disk formats
SCENE_MANIFEST_FILE = "scene.json"
DETECTION_MANIFEST_FILE = "manifest.json"
DETECTION_CLASSES_FILE = "classes.json"
DETECTION_IMAGES_FOLDER = "images"
DETECTION_LABELS_FOLDER = "labels"
PALETTE_FILE = "palette.json"
RUN_RECORD_FILE = "run.json"
TRAINING_LOG_FILE = "train_log.jsonl"
REQUESTS_FILE = "requests.json"
CHECKPOINT_FILE = "model.ckpt"
IMAGES_FOLDER = "images"
MASKS_FOLDER = "masks"

SOURCE_REAL = "real"
SOURCE_SYNTHETIC = "synthetic"
SOURCE_TAGS = [SOURCE_REAL, SOURCE_SYNTHETIC]

DETECTION_DECIMALS = 6

CHECKPOINT_MAGIC = b"KPLN"
CHECKPOINT_VERSION = 1
CHECKPOINT_PRECISION_DEFAULT = "float64"
CHECKPOINT_PRECISIONS = {"float64": "<f8", "float32": "<f4"}

DEPTH_PNG_SCALE = 1000.0  # millimeters per meter in 16-bit depth images

# Standard toy scene
TOY_SCENE_NAME = "toy-dyn-1"
TOY_SCENE_FRAMES = 60
TOY_SCENE_RESOLUTION = 64
TOY_SCENE_SEED = 7

CONFIG_FILE = os.path.join(os.getcwd(), "config.json")
