"""Checkpoints, run configs, protocols, reports and the command line."""

from .checkpoint import FORMAT, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, resolve
from .protocols import run
from .report import Report
