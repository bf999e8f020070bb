"""File formats and dataset plumbing."""

from .cif import CifParseError, parse_cif, read_cif, write_cif
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointFingerprintError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .manifest import DatasetManifest, read_manifest, split_entries, write_manifest
from .toy import toy_dataset

__all__ = [
    "CifParseError", "parse_cif", "read_cif", "write_cif",
    "Checkpoint", "CheckpointError", "CheckpointFingerprintError",
    "CheckpointTruncatedError", "CheckpointVersionError", "load_checkpoint", "save_checkpoint",
    "DatasetManifest", "read_manifest", "split_entries", "write_manifest",
    "toy_dataset",
]
