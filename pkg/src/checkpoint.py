"""Checkpoints: named MMT1 tensors in `tensors.bin` plus a JSON manifest."""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from src.errors import FormatError
from src.tensor_io import read_mmt1, write_mmt1

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TENSORS_NAME = "tensors.bin"
FORMAT_VERSION = 1


def save_checkpoint(directory: Union[str, Path], tensors: Dict[str, np.ndarray], manifest: Dict[str, Any]) -> Path:
    """
    Writes a checkpoint directory.

    Args:
        directory: Output directory (created if missing).
        tensors: Name -> array, stored in insertion order.
        manifest: JSON-serializable metadata; the tensor names and format
            version are added.

    Returns:
        The checkpoint directory.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / TENSORS_NAME, "wb") as f:
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_mmt1(f, array)
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = list(tensors)
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Checkpoint written to {directory} ({len(tensors)} tensors)")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Reads a checkpoint directory written by `save_checkpoint`.

    Returns:
        (tensors, manifest)
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"No checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as error:
        raise FormatError(f"Malformed manifest {manifest_path}: {error}") from None

    tensors: Dict[str, np.ndarray] = {}
    with open(directory / TENSORS_NAME, "rb") as f:
        while True:
            header = f.read(2)
            if not header:
                break
            if len(header) != 2:
                raise FormatError(f"Truncated tensor name header in {directory / TENSORS_NAME}")
            (length,) = struct.unpack("<H", header)
            name = f.read(length).decode("utf-8")
            tensors[name] = read_mmt1(f)

    missing = [name for name in manifest.get("tensors", []) if name not in tensors]
    if missing:
        raise FormatError(f"Checkpoint {directory} is missing tensors: {missing[:5]}")
    return tensors, manifest


def subset(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Returns the tensors under `prefix` with the prefix stripped."""
    return {name[len(prefix):]: array for name, array in tensors.items() if name.startswith(prefix)}


def prefixed(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}{name}": array for name, array in tensors.items()}
