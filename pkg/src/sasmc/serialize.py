"""Small helpers shared by the file interfaces: canonical JSON and hashing."""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable configuration object."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
