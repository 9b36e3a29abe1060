import os
from pathlib import Path
from dotenv import load_dotenv

# --- Load Environment Variables ---
load_dotenv()

# --- Runtime Configuration ---
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
DEFAULT_WORKERS = max(1, int(os.getenv("ISAC_WORKERS", "1")))
METRICS_ENABLED = os.getenv("ISAC_METRICS", "1") == "1"
PROGRESS_ENABLED = os.getenv("ISAC_PROGRESS", "0") == "1"

# --- Path Configuration ---
DEFAULT_OUTPUT_DIR = Path(os.getenv("ISAC_OUTPUT_DIR", "runs"))

# --- Physical Constants ---
# 3e8 exactly: the tap examples (100 m -> tap 66 at 99 MHz) depend on it
SPEED_OF_LIGHT = 3e8
THERMAL_NOISE_DBM_PER_HZ = -174.0
DEFAULT_NOISE_FIGURE_DB = 9.0

# --- Geometry Tolerances ---
EPS_COLLINEAR = 1e-6  # normalized triangle area
EPS_GEO = 1e-6  # meters, trilateration residual and range-set equality
EPS_TAP_BOUNDARY = 1e-12  # relative; d within this of l * w is on the boundary and maps to tap l

# --- Phase I Solver Defaults ---
LASSO_TOL = 1e-8
LASSO_MAX_ITER = 5000
SUPPORT_NOISE_MULTIPLE = 3.0  # absolute floor, in units of per-tap noise std
# relative floor rho, at round-off level not 0.05: with 1/d^2 radar gains a distant
# target can sit far below 5% of the strongest tap
SUPPORT_REL_THRESHOLD = 1e-7

# --- Phase II Solver Defaults ---
GN_TOL = 1e-9
GN_MAX_ITER = 100
GN_MAX_HALVINGS = 30
DELTA0_SIGMA_MULTIPLE = 6.0

# --- Harness Defaults ---
DEFAULT_TRIALS = 1000
MAX_REJECTIONS = 10_000
ORACLE_MAX_TARGETS = 4
ORACLE_MAX_BS = 5
