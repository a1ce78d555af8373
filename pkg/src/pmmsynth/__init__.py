"""Multi-dataset, multi-modal MRI synthesis on deterministic phantom data."""

__version__ = "0.1.0"
