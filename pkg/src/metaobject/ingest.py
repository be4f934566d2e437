"""Dataset manifests and their companion binary feature files.

A dataset lives in two files side by side::

    <stem>.manifest   UTF-8 text, one record per line, '#' comments
    <stem>.bin        "MOBJ" header followed by little-endian float32 records

Manifest records::

    format <version>
    dim <d>
    classes <C>
    images <count>
    patches <count>
    image <image_id> <scene_label> <split> <offset>
    patch <patch_id> <image_id> <cx> <cy> <w> <h> <level> <offset>

Offsets count float32 values from the end of the binary header. Holistic
records are written first, then patch records, each exactly ``d`` values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .core import Dataset, ImageRecord, PatchRecord, l2_normalize, validate_dataset

FORMAT_VERSION = 1
MAGIC = b"MOBJ"
_HEADER = struct.Struct("<4sIIIQQ")


class DatasetFormatError(ValueError):
    """Base class for manifest/binary parse failures."""


class ManifestHeaderError(DatasetFormatError):
    pass


class ManifestRecordError(DatasetFormatError):
    pass


class TruncatedBinaryError(DatasetFormatError):
    pass


class DanglingReferenceError(DatasetFormatError):
    pass


class EmptyDatasetError(DatasetFormatError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".manifest", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".manifest"), p.with_suffix(".bin")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``ds`` as ``<path>.manifest`` + ``<path>.bin``.

    Output is byte-stable: identical datasets give identical files.
    """
    report = validate_dataset(ds)
    if not report.ok:
        raise ValueError("refusing to save an invalid dataset: " + "; ".join(report.violations[:5]))
    manifest_path, bin_path = _paths(path)
    d = ds.feature_dim

    lines = [
        "# metaobject dataset manifest",
        f"format {FORMAT_VERSION}",
        f"dim {d}",
        f"classes {ds.num_classes}",
        f"images {len(ds.images)}",
        f"patches {len(ds.patches)}",
    ]
    offset = 0
    blocks = []
    for im in ds.images:
        lines.append(f"image {im.image_id} {im.scene_label} {im.split} {offset}")
        blocks.append(np.asarray(im.holistic))
        offset += d
    for p in ds.patches:
        cx, cy, w, h = p.bbox
        lines.append(
            f"patch {p.patch_id} {p.image_id} {_fmt(cx)} {_fmt(cy)} {_fmt(w)} {_fmt(h)} {p.level} {offset}"
        )
        blocks.append(np.asarray(p.feature))
        offset += d

    data = np.concatenate(blocks).astype("<f4") if blocks else np.zeros(0, "<f4")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, d, ds.num_classes, len(ds.patches), len(ds.images))
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with open(bin_path, "wb") as fh:
            fh.write(header)
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"failed writing dataset to {manifest_path} / {bin_path}: {exc}") from exc
    return manifest_path, bin_path


def load_dataset(manifest_path, normalize: bool = True) -> Dataset:
    """Parse a manifest and its binary file into a validated :class:`Dataset`.

    Features are L2-normalized unless ``normalize`` is False (raw-scale mode).
    """
    manifest_path, bin_path = _paths(manifest_path)
    header: dict[str, int] = {}
    image_rows = []
    patch_rows = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            kind = tok[0]
            try:
                if kind in ("format", "dim", "classes", "images", "patches"):
                    if len(tok) != 2 or not tok[1].lstrip("-").isdigit():
                        raise ManifestHeaderError(
                            f"{manifest_path}:{lineno}: malformed header line {line!r}, expected '{kind} <integer>'"
                        )
                    header[kind] = int(tok[1])
                elif kind == "image":
                    if len(tok) != 5:
                        raise ValueError("expected 4 fields")
                    image_rows.append((lineno, int(tok[1]), int(tok[2]), tok[3], int(tok[4])))
                elif kind == "patch":
                    if len(tok) != 9:
                        raise ValueError("expected 8 fields")
                    bbox = tuple(float(t) for t in tok[3:7])
                    patch_rows.append((lineno, int(tok[1]), int(tok[2]), bbox, tok[7], int(tok[8])))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except DatasetFormatError:
                raise
            except ValueError as exc:
                raise ManifestRecordError(f"{manifest_path}:{lineno}: malformed record: {exc}") from None

    for key in ("format", "dim", "classes", "images", "patches"):
        if key not in header:
            raise ManifestHeaderError(f"{manifest_path}: malformed header, missing {key!r}")
    if header["format"] != FORMAT_VERSION:
        raise ManifestHeaderError(f"{manifest_path}: unsupported format version {header['format']}")
    d = header["dim"]
    if d < 1:
        raise ManifestHeaderError(f"{manifest_path}: malformed header, dim must be positive")
    if header["images"] == 0 or not image_rows:
        raise EmptyDatasetError(f"{manifest_path}: empty dataset")
    if header["images"] != len(image_rows) or header["patches"] != len(patch_rows):
        raise ManifestHeaderError(
            f"{manifest_path}: header counts ({header['images']} images, {header['patches']} patches) "
            f"disagree with records ({len(image_rows)}, {len(patch_rows)})"
        )

    with open(bin_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedBinaryError(f"{bin_path}: file shorter than header")
    magic, version, bd, bc, npatch, nimg = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ManifestHeaderError(f"{bin_path}: bad magic {magic!r}")
    if (version, bd, bc, npatch, nimg) != (
        FORMAT_VERSION, d, header["classes"], header["patches"], header["images"]
    ):
        raise ManifestHeaderError(f"{bin_path}: binary header disagrees with manifest header")
    values = np.frombuffer(blob, dtype="<f4", count=(len(blob) - _HEADER.size) // 4, offset=_HEADER.size)

    prev = -1

    def take(offset, lineno, what):
        nonlocal prev
        if offset <= prev:
            raise ManifestRecordError(f"{manifest_path}:{lineno}: offset {offset} not strictly increasing")
        if offset - prev < d and prev >= 0:
            raise ManifestRecordError(f"{manifest_path}:{lineno}: offset {offset} overlaps previous record")
        prev = offset
        if offset + d > values.size:
            raise TruncatedBinaryError(
                f"{bin_path}: truncated binary, {what} needs values [{offset}, {offset + d}) "
                f"but only {values.size} present"
            )
        vec = values[offset:offset + d].astype(np.float64)
        return l2_normalize(vec) if normalize else vec

    images = []
    image_ids = set()
    for lineno, iid, label, split, off in image_rows:
        image_ids.add(iid)
        images.append((iid, label, split, take(off, lineno, f"image {iid}")))
    patches = []
    members: dict[int, list[int]] = {iid: [] for iid in image_ids}
    for lineno, pid, iid, bbox, level, off in patch_rows:
        if iid not in image_ids:
            raise DanglingReferenceError(
                f"{manifest_path}:{lineno}: patch {pid} references unknown image_id {iid}"
            )
        feat = take(off, lineno, f"patch {pid}")
        patches.append(PatchRecord(pid, iid, feat, bbox, level))
        members[iid].append(pid)

    ds = Dataset(
        images=tuple(
            ImageRecord(iid, label, tuple(members[iid]), hol, split) for iid, label, split, hol in images
        ),
        patches=tuple(patches),
        num_classes=header["classes"],
        feature_dim=d,
    )
    report = validate_dataset(ds)
    if not report.ok:
        raise DatasetFormatError(f"{manifest_path}: " + "; ".join(report.violations[:5]))
    return ds


def dataset_files_exist(path) -> bool:
    m, b = _paths(path)
    return m.exists() and b.exists()


def dataset_stem(path) -> str:
    m, _ = _paths(path)
    return os.fspath(m.with_suffix(""))
