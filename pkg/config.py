"""
Configuration for the Truth-Maximized Diffusion Classifier experiments.

Module-level defaults shared by the library, the pipeline and the CLI.
Per-experiment settings live in JSON/YAML documents under configs/.
"""

import logging
from pathlib import Path

from pydantic import ConfigDict

# =============================================================================
# PATHS
# =============================================================================

BASE_DIR = Path(__file__).parent
CONFIGS_DIR = BASE_DIR / "configs"
OUTPUT_DIR = BASE_DIR / "outputs"
RUNS_DIR = OUTPUT_DIR / "runs"

# Layout of a single run directory
RUN_DATA_DIR = "data"
RUN_CHECKPOINT_DIR = "checkpoints"
RUN_ATTACK_DIR = "attacks"
RUN_METRICS_DIR = "metrics"
RUN_TM_DIR = "tm"
RUN_REPORT_DIR = "report"
RUN_LOG_DIR = "logs"
MANIFEST_NAME = "manifest.json"

# =============================================================================
# LOGGING CONFIGURATION
# =============================================================================

LOG_LEVEL = logging.INFO
LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# =============================================================================
# REPRODUCIBILITY
# =============================================================================

DEFAULT_SEED = 2024
FORMAT_VERSION = 1

# CSV floats are written with enough digits to round-trip float64
CSV_FLOAT_FORMAT = "%.17g"

# =============================================================================
# CHECKPOINT FORMAT
# =============================================================================

CHECKPOINT_MAGIC = b"TMDC"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".tmdc"

# =============================================================================
# DATA RANGE
# =============================================================================

DATA_LOWER = -1.0
DATA_UPPER = 1.0

# =============================================================================
# EXPERIMENT DOCUMENTS
# =============================================================================

# Unknown keys and type coercion are rejected at every nesting level
STRICT_DOCUMENT = ConfigDict(extra="forbid", strict=True)

# =============================================================================
# CLI EXIT CODES
# =============================================================================

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_STAGE_FAILURE = 2

# Reports flag every restart-PGD result with this label
AUTOATTACK_LITE_LABEL = "AutoAttack-lite"
AUTOATTACK_LITE_DISCLAIMER = (
    "AutoAttack-lite: multi-restart PGD with step halving; stands in for the "
    "full AutoAttack ensemble (no Square, FAB or targeted APGD)."
)
