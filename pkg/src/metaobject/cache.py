"""On-disk cache for stage outputs, keyed by stage name and config hash.

File layout: one JSON header line (stage, config hash, sha256 over both and
the body),
then the body, an ``.npz`` archive holding a JSON ``structure`` entry plus
every array referenced from it.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

CACHE_SUFFIX = ".mobc"


class CacheError(RuntimeError):
    pass


class StaleCacheError(CacheError):
    """The cached entry was produced under a different configuration."""


class CacheChecksumError(CacheError):
    """The cache file is corrupt (checksum or header mismatch)."""


class MissingCacheError(CacheError):
    pass


def _encode(obj, arrays: dict):
    if isinstance(obj, np.ndarray):
        key = f"a{len(arrays)}"
        arrays[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        for k in obj:
            if not isinstance(k, str):
                raise TypeError(f"cache payload keys must be str, got {k!r}")
        return {"__dict__": {k: _encode(v, arrays) for k, v in obj.items()}}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_encode(v, arrays) for v in obj]}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot cache object of type {type(obj).__name__}")


def _decode(obj, arrays):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return arrays[obj["__array__"]]
        if "__dict__" in obj:
            return {k: _decode(v, arrays) for k, v in obj["__dict__"].items()}
        if "__list__" in obj:
            return [_decode(v, arrays) for v in obj["__list__"]]
    return obj


def dumps_payload(payload) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    structure = json.dumps(_encode(payload, arrays), sort_keys=True)
    buf = io.BytesIO()
    np.savez(buf, __structure__=np.array(structure), **arrays)
    return buf.getvalue()


def loads_payload(body: bytes):
    with np.load(io.BytesIO(body), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__structure__"}
        structure = json.loads(str(z["__structure__"]))
    return _decode(structure, arrays)


def config_hash(fields) -> str:
    """Stable hash of a JSON-able mapping; insensitive to key order."""
    text = json.dumps(fields, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _digest(stage_name: str, cfg_hash: str, body: bytes) -> str:
    h = hashlib.sha256(f"{stage_name}\0{cfg_hash}\0".encode("utf-8"))
    h.update(body)
    return h.hexdigest()


class StageCache:
    """Directory of cached stage payloads."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, stage_name: str) -> Path:
        return self.root / f"{stage_name}{CACHE_SUFFIX}"

    def exists(self, stage_name: str) -> bool:
        return self.path(stage_name).exists()

    def write(self, stage_name: str, payload, cfg_hash: str) -> Path:
        body = dumps_payload(payload)
        header = {
            "stage": stage_name,
            "config_hash": cfg_hash,
            "sha256": _digest(stage_name, cfg_hash, body),
        }
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(stage_name)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(body)
        tmp.replace(path)
        return path

    def read_header(self, stage_name: str) -> dict:
        path = self.path(stage_name)
        if not path.exists():
            raise MissingCacheError(f"no cache entry for stage {stage_name!r} in {self.root}")
        with open(path, "rb") as fh:
            line = fh.readline()
        try:
            return json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CacheChecksumError(f"{path}: corrupt cache header ({exc})") from None

    def read(self, stage_name: str, cfg_hash: str | None = None):
        path = self.path(stage_name)
        if not path.exists():
            raise MissingCacheError(f"no cache entry for stage {stage_name!r} in {self.root}")
        raw = path.read_bytes()
        line, sep, body = raw.partition(b"\n")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CacheChecksumError(f"{path}: corrupt cache header ({exc})") from None
        if not sep or not isinstance(header, dict) or header.get("stage") != stage_name:
            raise CacheChecksumError(f"{path}: corrupt cache header")
        if _digest(stage_name, str(header.get("config_hash")), body) != header.get("sha256"):
            raise CacheChecksumError(f"{path}: checksum mismatch, cache file is corrupt")
        if cfg_hash is not None and header.get("config_hash") != cfg_hash:
            raise StaleCacheError(
                f"stale cache for stage {stage_name!r}: stored config hash "
                f"{header.get('config_hash')} != current {cfg_hash}"
            )
        return loads_payload(body)


def write_stage_cache(root, stage_name: str, payload, cfg_hash: str) -> Path:
    return StageCache(root).write(stage_name, payload, cfg_hash)


def read_stage_cache(root, stage_name: str, cfg_hash: str | None = None):
    return StageCache(root).read(stage_name, cfg_hash)
