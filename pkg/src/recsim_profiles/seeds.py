"""Seed split tree.

Every random draw descends from the root seed through a labelled path, e.g.
``derive_seed(root, "run", 2, "user", "17", "instance", "ranking", 0)``.
Seeds are the first 8 bytes of SHA-256 over the path, so they do not depend
on call order or on Python's hash randomisation.
"""

from __future__ import annotations

import hashlib
import json
import random


def derive_seed(root: int, *path) -> int:
    blob = "/".join([str(int(root))] + [str(p) for p in path])
    return int.from_bytes(hashlib.sha256(blob.encode("utf-8")).digest()[:8], "big") >> 1


def rng_for(root: int, *path) -> random.Random:
    return random.Random(derive_seed(root, *path))


def digest_json(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
