"""Versioned key -> (shape, float64 data) checkpoint files.

Arrays are stored as base64 of little-endian float64 bytes inside a JSON
document, so round trips are bit-exact.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np

from querystream.errors import ParseError

FORMAT = "querystream.tensors"
VERSION = 1


def encode_array(arr: np.ndarray) -> dict[str, Any]:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad array record: {exc}") from exc
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ParseError(f"array payload has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float64)


def dumps(arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "tensors": {k: encode_array(v) for k, v in arrays.items()},
    }
    return json.dumps(doc, sort_keys=True)


def loads(text: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not JSON: {exc}", line=exc.lineno) from exc
    if doc.get("format") != FORMAT:
        raise ParseError(f"not a tensor checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}")
    arrays = {k: decode_array(v) for k, v in doc["tensors"].items()}
    return arrays, doc.get("meta", {})


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    Path(path).write_text(dumps(arrays, meta), encoding="utf-8")


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_text(encoding="utf-8"))
