"""
Environment-backed defaults.

Values can be overridden in a local .env file:

    NEURO_DSE_OUT_DIR=runs
    NEURO_DSE_LOG_LEVEL=INFO
    NEURO_DSE_WORKERS=4
    NEURO_DSE_TORCH_THREADS=1
"""
import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

DEFAULT_OUT_DIR = os.getenv("NEURO_DSE_OUT_DIR", "runs")
LOG_LEVEL = os.getenv("NEURO_DSE_LOG_LEVEL", "INFO")
DEFAULT_WORKERS = int(os.getenv("NEURO_DSE_WORKERS", "1"))
TORCH_THREADS = int(os.getenv("NEURO_DSE_TORCH_THREADS", "1"))

# Base frequency of the per-unit system (rad/s)
OMEGA_BASE = 2.0 * 3.141592653589793 * 60.0

# Recorded in every results file
NOISE_INTERPRETATION = (
    "noise levels written as N(0, e-6) / N(0, e-4) are read as variances 1e-6 / 1e-4; "
    "measurement_var is per sample, process_var is a per-second intensity (per-step variance = process_var*dt)"
)
