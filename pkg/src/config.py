import hashlib
import hmac
import os
from pathlib import Path
from typing import Dict, Union

from src.models import ExperimentConfig

# Process-level settings
PACKAGE_SECRET = os.getenv("MOEFED_PACKAGE_SECRET")
CONFIG_PATH = os.getenv("MOEFED_CONFIG")
SERVER_URL = os.getenv("MOEFED_SERVER_URL", "http://localhost:8000")
OUT_DIR = os.getenv("MOEFED_OUT_DIR", "runs")
LOG_LEVEL = os.getenv("MOEFED_LOG_LEVEL", "INFO")
PORT = int(os.getenv("PORT", "8000"))


# Checked lazily so the simulator runs without exchange settings
def _validate_config():
    """Validate that the variables needed by the exchange surface are set."""
    if not PACKAGE_SECRET:
        raise ValueError("MOEFED_PACKAGE_SECRET environment variable is required")


def sign_body(body: bytes, secret: str) -> str:
    """Return the sha256 HMAC signature header value for a package body."""
    digest = hmac.new(secret.encode("utf-8"), body, hashlib.sha256).hexdigest()
    return f"sha256={digest}"


def package_headers(body: bytes) -> Dict[str, str]:
    """Return headers for uploading a signed update package."""
    _validate_config()
    return {
        "Content-Type": "application/json",
        "X-Package-Signature-256": sign_body(body, PACKAGE_SECRET),
    }


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """Load and validate an experiment document from a JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    return ExperimentConfig.model_validate_json(text)
