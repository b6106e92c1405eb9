"""Numerical defaults, output format constants and logging setup."""
import logging

# --- Output format ---
FORMAT_VERSION = "1.0"
CSV_FLOAT_FORMAT = "%.17g"
SNAPSHOT_HEADER = "nx ny x0 y0 Lx Ly t"

# --- Grid ---
MIN_NODES = 8

# --- Aerodynamic quadrature ---
DEFAULT_THETA_N = 64
DEFAULT_S_N = 64
MIN_QUADRATURE = 16

# --- Solvers ---
AIRY_RTOL = 1e-10
AIRY_MAX_REFINEMENTS = 3
NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 30
LINESEARCH_MAX_HALVINGS = 20
GMRES_RTOL = 1e-12
DEDUP_TOL = 1e-5

# --- Time stepping ---
NEWMARK_BETA = 0.25
NEWMARK_GAMMA = 0.5
DT_SAFETY = 0.5

# --- Diagnostics ---
LYAPUNOV_NU = 0.1
LOWER_FREQUENCY_EPS = 0.1
LOWER_FREQUENCY_RTOL = 1e-9
GROWTH_FACTOR = 10.0
BOOKKEEPING_RTOL = 1e-12

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level="INFO"):
    """Install one stream handler on the root logger (entry points only)."""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    logging.basicConfig(level=level, format=LOG_FORMAT)
