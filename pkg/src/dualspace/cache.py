"""On-disk feature cache.

Layout per entry: `<key>.bin` holding a little-endian float32 row-major array
and `<key>.json` sidecar with shape, backbone identifier, dataset name, split
tag, and a content hash of the binary payload. The key is a hash of the
backbone id, the preprocessing parameters, and the sample ids, so a changed
backbone or prep recipe never aliases an old entry. Writes go through a
temp-file rename, so concurrent readers never observe a torn entry.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_SIDECAR_VERSION = 1


def cache_key(backbone_id: str, prep_params: dict, sample_ids) -> str:
    payload = json.dumps(
        {"backbone": backbone_id, "prep": prep_params,
         "ids": [str(s) for s in sample_ids]},
        sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class FeatureCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, key: str) -> tuple[Path, Path]:
        return self.root / f"{key}.bin", self.root / f"{key}.json"

    def put(self, key: str, values: np.ndarray, meta: dict) -> None:
        bin_path, json_path = self._paths(key)
        payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
        sidecar = dict(meta)
        sidecar.update(
            version=_SIDECAR_VERSION,
            shape=list(values.shape),
            dtype="<f4",
            content_hash=hashlib.sha256(payload).hexdigest(),
        )
        tmp_bin = bin_path.with_suffix(".bin.tmp")
        tmp_bin.write_bytes(payload)
        os.replace(tmp_bin, bin_path)
        tmp_json = json_path.with_suffix(".json.tmp")
        tmp_json.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
        os.replace(tmp_json, json_path)

    def get(self, key: str) -> np.ndarray | None:
        """Return the cached array, or None when the entry is absent or fails
        verification (caller re-extracts)."""
        bin_path, json_path = self._paths(key)
        if not bin_path.exists() or not json_path.exists():
            return None
        try:
            sidecar = json.loads(json_path.read_text())
            payload = bin_path.read_bytes()
            if sidecar.get("version") != _SIDECAR_VERSION:
                raise ValueError(f"sidecar version {sidecar.get('version')}")
            if hashlib.sha256(payload).hexdigest() != sidecar["content_hash"]:
                raise ValueError("content hash mismatch")
            shape = tuple(sidecar["shape"])
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            logger.warning("cache entry %s is corrupt (%s); will re-extract", key, exc)
            return None
        return arr.astype(np.float64)

    def meta(self, key: str) -> dict | None:
        _, json_path = self._paths(key)
        if not json_path.exists():
            return None
        try:
            return json.loads(json_path.read_text())
        except json.JSONDecodeError:
            return None

    def has(self, key: str) -> bool:
        return self.get(key) is not None
