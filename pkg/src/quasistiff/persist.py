"""Versioned JSON model files and atomic artifact writes.

Floats go through ``json`` which serialises with ``repr``, so every value
round-trips exactly and loaded models reproduce predictions bit-for-bit.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(payload: dict) -> str:
    return json.dumps(payload, indent=1, sort_keys=True, default=_default, allow_nan=False) + "\n"


def save_model(path, kind: str, payload: dict) -> Path:
    doc = {"format": f"quasistiff.{kind}", "version": FORMAT_VERSION, **payload}
    return atomic_write_text(path, dumps(doc))


def load_model(path, kind: str) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"model file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid model file ({exc})") from None
    expected = f"quasistiff.{kind}"
    if doc.get("format") != expected:
        raise DataError(f"{path}: expected format {expected!r}, found {doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {doc.get('version')}")
    return doc
