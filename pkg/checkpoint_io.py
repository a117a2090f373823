"""
Single-file parameter container.

Layout::

    b"DPMCKPT1"
    uint64 little-endian header length
    UTF-8 JSON header {"config": {...}, "manifest": [{name, shape, dtype, offset, nbytes}, ...]}
    raw little-endian blobs in manifest order

Offsets are relative to the first byte after the header.
"""
import json
import struct
import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from errors import DataError

logger = logging.getLogger('SpeechDPM')

MAGIC = b"DPMCKPT1"
_LENGTH = struct.Struct('<Q')
_DTYPES = {'float32': '<f4', 'float64': '<f8'}


def save_checkpoint(path: Union[str, Path], config: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> Path:
    """
    Write ``arrays`` (in insertion order) and a config record to ``path``.

    Args:
        path: Destination file.
        config: JSON-serialisable key-value config records.
        arrays: Named float arrays.

    Returns:
        The written path.
    """
    manifest, offset = [], 0
    blobs = []
    for name, array in arrays.items():
        dtype = np.dtype(array.dtype).name
        if dtype not in _DTYPES:
            raise DataError(f"checkpoint: unsupported dtype {dtype} for {name}")
        blob = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        manifest.append({'name': name, 'shape': list(array.shape), 'dtype': dtype, 'offset': offset, 'nbytes': len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({'config': config, 'manifest': manifest}, sort_keys=True).encode('utf-8')

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    logger.info(f"Saved {len(manifest)} arrays ({offset} bytes) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Read a container written by ``save_checkpoint``.

    Returns:
        ``(config, arrays)`` with arrays in manifest order.

    Raises:
        DataError: wrong magic, malformed header or manifest entry, or truncated blobs.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a DPMCKPT1 container")
    start = len(MAGIC) + _LENGTH.size
    if len(raw) < start:
        raise DataError(f"{path}: truncated before header length")
    (header_len,) = _LENGTH.unpack(raw[len(MAGIC):start])
    try:
        header = json.loads(raw[start:start + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: malformed header: {e}") from None
    if (not isinstance(header, dict) or not isinstance(header.get('manifest', []), list)
            or not isinstance(header.get('config', {}), dict)):
        raise DataError(f"{path}: header must be an object with a config object and a manifest list")
    body = memoryview(raw)[start + header_len:]

    arrays = {}
    for index, entry in enumerate(header.get('manifest', [])):
        try:
            name, offset, nbytes = entry['name'], int(entry['offset']), int(entry['nbytes'])
            dtype, shape = entry['dtype'], tuple(int(n) for n in entry['shape'])
            layout = _DTYPES[dtype]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: manifest entry {index} is malformed: {e!r}", record_index=index) from None
        end = offset + nbytes
        if offset < 0 or end > len(body):
            raise DataError(f"{path}: blob {name!r} truncated", record_index=index)
        try:
            array = np.frombuffer(body[offset:end], dtype=layout).reshape(shape)
        except ValueError as e:
            raise DataError(f"{path}: blob {name!r} does not fit shape {list(shape)}: {e}", record_index=index) from None
        arrays[name] = array.astype(dtype)
    return header.get('config', {}), arrays
