"""Canonical JSON encoding shared by the store, config files, and reports.

Canonical form: UTF-8, sorted keys, no insignificant whitespace, reals as
shortest round-trip decimals (Python's float repr).  Fingerprints are the
SHA-256 hex digest of the canonical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any


def canonical_dumps(obj: Any) -> str:
    _reject_nonfinite(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_dumps(obj).encode("utf-8")


def fingerprint(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint_obj(obj: Any) -> str:
    return fingerprint(canonical_bytes(obj))


def loads(text: str | bytes) -> Any:
    return json.loads(text)


def _reject_nonfinite(obj: Any) -> None:
    # json.dumps would emit non-standard NaN/Infinity tokens; refuse instead.
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError("non-finite real in canonical JSON payload")
    if isinstance(obj, dict):
        for key, value in obj.items():
            if not isinstance(key, str):
                raise ValueError("canonical JSON requires string keys")
            _reject_nonfinite(value)
    elif isinstance(obj, (list, tuple)):
        for value in obj:
            _reject_nonfinite(value)
