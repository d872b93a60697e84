"""Multisensor LDED monitoring: feature extraction, fusion, voxel twin and correction."""

from .session import FusedDataset, Manifest, Session, load_session, validate_session, write_session
from .sim import BuildSpec, simulate_build

__version__ = "0.1.0"
__all__ = [
    "BuildSpec",
    "FusedDataset",
    "Manifest",
    "Session",
    "load_session",
    "simulate_build",
    "validate_session",
    "write_session",
]
