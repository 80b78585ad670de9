"""
Utility helper functions shared by the training engine and the command line.
"""

import hashlib
import json
import logging
import os
import random
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np
import torch

logger = logging.getLogger(__name__)


def validate_positive_int(value, name):
    """Validate a strictly positive integer."""
    try:
        if isinstance(value, bool) or int(value) != float(value):
            return False, f"{name} must be an integer"
        value = int(value)
    except (ValueError, TypeError):
        return False, f"{name} must be a valid integer"
    if value < 1:
        return False, f"{name} must be at least 1"
    return True, value


def validate_positive_float(value, name, allow_zero=False):
    """Validate a finite positive (or nonnegative) real number."""
    try:
        value = float(value)
    except (ValueError, TypeError):
        return False, f"{name} must be a valid number"
    if not np.isfinite(value):
        return False, f"{name} must be finite"
    if value < 0 or (value == 0 and not allow_zero):
        bound = "nonnegative" if allow_zero else "positive"
        return False, f"{name} must be {bound}"
    return True, value


def validate_choice(value, choices, name):
    """Validate that a (case-insensitive) string is one of ``choices``."""
    if not isinstance(value, str):
        return False, f"{name} must be one of {sorted(choices)}"
    value = value.lower()
    if value not in choices:
        return False, f"{name} must be one of {sorted(choices)}, got '{value}'"
    return True, value


def validate_range(pair, name, lower=None):
    """Validate an ordered (low, high) pair."""
    try:
        low, high = (float(v) for v in pair)
    except (ValueError, TypeError):
        return False, f"{name} must be a pair of numbers"
    if low > high:
        return False, f"{name} must satisfy low <= high"
    if lower is not None and low < lower:
        return False, f"{name} must not go below {lower}"
    return True, (low, high)


def derive_seed(*parts):
    """Stable 32-bit seed from arbitrary parts (e.g. global seed, volume id, slice)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def set_global_seed(seed, deterministic=False):
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


def format_score(value):
    """Format a metric for status lines."""
    return f"{value:.4f}"


def write_json(data, path):
    """Write a JSON document with stable key order."""
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


@dataclass
class RunManifest:
    """Record of one command invocation, written before any work starts."""

    command: str
    config_path: str
    config_hash: str
    output_dir: str
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: str = None
    status: str = "running"
    filename: str = "manifest.json"

    @property
    def path(self):
        return os.path.join(self.output_dir, self.filename)

    def write(self):
        os.makedirs(self.output_dir, exist_ok=True)
        record = asdict(self)
        record.pop("filename")
        write_json(record, self.path)

    def finish(self, status="success"):
        self.finished_at = datetime.now().isoformat()
        self.status = status
        self.write()
        logger.info("Run %s finished with status %s", self.command, status)
