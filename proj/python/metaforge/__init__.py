"""Few-shot meta-learning for protein mutation effect regression."""

import json

from . import _core
from ._core import (
    CheckpointError,
    ContractViolation,
    DataError,
    FormatError,
    MetaforgeError,
    ParseError,
    ValidationError,
    encode,
    nmse,
)

__version__ = _core.__version__

__all__ = [
    "CheckpointError",
    "ContractViolation",
    "DataError",
    "FormatError",
    "MetaforgeError",
    "ParseError",
    "ValidationError",
    "cli",
    "default_config",
    "encode",
    "nmse",
    "run_cross_task",
    "run_finetune",
    "run_pooled",
]


def default_config():
    return json.loads(_core.default_config())


def _dump(config):
    return json.dumps(config or {})


def run_cross_task(data_dir, target, config=None):
    """Meta-trains on every task except `target` and returns its report."""
    return json.loads(_core.run_cross_task(str(data_dir), target, _dump(config)))[0]


def run_pooled(data_dir, config=None):
    """Meta-trains on every task's train split; returns one report per task."""
    return json.loads(_core.run_pooled(str(data_dir), _dump(config)))


def run_finetune(data_dir, target, pooled=False, config=None):
    return json.loads(_core.run_finetune(str(data_dir), target, pooled, _dump(config)))[0]


def cli(*args):
    """Runs a metaforge command line in-process. Returns (exit_code, stdout, stderr)."""
    return _core.cli([str(a) for a in args])
