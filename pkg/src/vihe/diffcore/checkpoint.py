"""
Versioned checkpoint container.

Layout (all little-endian):
    8 bytes   magic b"VIHECKPT"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON: {"metadata": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}]}
    payload   concatenated float32 buffers, offsets relative to the payload start
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from vihe.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"VIHECKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

PathLike = Union[str, Path]


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> None:
    """
    Write named arrays and JSON metadata.

    Args:
        path: Output file
        tensors: name -> array (stored as float32)
        metadata: JSON-serializable dictionary (model config, config hash, step)
    """
    entries = []
    buffers = []
    offset = 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype='<f4')
        raw = data.tobytes()
        entries.append({'name': name, 'shape': list(data.shape), 'offset': offset, 'nbytes': len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({'metadata': metadata, 'tensors': entries}, sort_keys=True).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in buffers:
            f.write(raw)
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {path}")


def _read_prefix(f, path: PathLike) -> dict:
    prefix = f.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(f.read(header_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}")
    header['version'] = version
    return header


def read_header(path: PathLike) -> dict:
    """Return the parsed JSON header (metadata and tensor table) without loading buffers."""
    with open(path, 'rb') as f:
        return _read_prefix(f, path)


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (tensors, metadata)

    Raises:
        CheckpointError: On bad magic, version, header or truncated payload
    """
    with open(path, 'rb') as f:
        header = _read_prefix(f, path)
        payload = f.read()
    tensors = {}
    for entry in header.get('tensors', []):
        start, nbytes = entry['offset'], entry['nbytes']
        if start + nbytes > len(payload):
            raise CheckpointError(f"Tensor '{entry['name']}' runs past the end of {path}")
        array = np.frombuffer(payload, dtype='<f4', count=nbytes // 4, offset=start)
        tensors[entry['name']] = array.reshape(entry['shape']).astype(np.float32)
    logger.debug(f"Loaded {len(tensors)} tensors from {path}")
    return tensors, header.get('metadata', {})
