"""On-disk formats.

NNQF model: a UTF-8 JSON manifest plus one blob of little-endian float32
values. Offsets and lengths in the manifest count elements, not bytes.

Tensor files (distilled batches, dataset batches): a JSON manifest with
``dims`` next to a raw little-endian float32 blob.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import BlobLengthError, ManifestError, ShapeError
from .layers import LAYER_KINDS, BatchNorm, Conv2D, Linear, SkipAdd
from .model import ModelGraph

NNQF_VERSION = 1
LE_F32 = np.dtype("<f4")


def blob_path_for(manifest_path):
    return Path(str(manifest_path) + ".bin")


def _layer_manifest(layer, offset, chunks):
    offsets = {}
    for name, arr in layer.tensors().items():
        flat = np.ascontiguousarray(arr, dtype=LE_F32).ravel()
        offsets[name] = [offset, int(flat.size)]
        chunks.append(flat)
        offset += flat.size
    return {"kind": layer.kind, "params": layer.params(), "blob_offsets": offsets}, offset


def model_to_manifest(model):
    model.validate()
    chunks, layers, offset = [], [], 0
    for layer in model.layers:
        entry, offset = _layer_manifest(layer, offset, chunks)
        layers.append(entry)
    manifest = {
        "nnqf_version": NNQF_VERSION,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "ends_with_softmax": model.ends_with_softmax,
        "layers": layers,
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=LE_F32)
    return manifest, blob


def save_model(model, path, extra=None):
    """Write ``path`` (manifest) and ``path + '.bin'`` (blob)."""
    path = Path(path)
    manifest, blob = model_to_manifest(model)
    manifest["blob_file"] = blob_path_for(path).name
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path_for(path).write_bytes(blob.astype(LE_F32).tobytes())
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def model_digest(model):
    """Content hash over structure and weights (ignores file metadata)."""
    manifest, blob = model_to_manifest(model)
    h = hashlib.sha256()
    h.update(json.dumps({k: manifest[k] for k in ("input_shape", "layers")},
                        sort_keys=True).encode())
    h.update(blob.astype(LE_F32).tobytes())
    return h.hexdigest()


def _tensor(blob, entry, name, shape, index):
    offsets = entry.get("blob_offsets", {})
    if name not in offsets:
        raise ManifestError(f"missing blob offset for {name!r}", index)
    try:
        off, length = (int(v) for v in offsets[name])
    except (TypeError, ValueError):
        raise ManifestError(f"bad blob offset for {name!r}", index) from None
    want = int(np.prod(shape))
    if length != want:
        raise BlobLengthError(f"{name!r} declares {length} floats but its shape "
                              f"{tuple(shape)} needs {want}", index)
    if off < 0 or off + length > blob.size:
        raise BlobLengthError(f"{name!r} spans floats [{off}, {off + length}) but the "
                              f"blob holds {blob.size}", index)
    return blob[off:off + length].astype(np.float32).reshape(shape)


def _build_layer(entry, blob, index):
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ManifestError("layer entry needs a 'kind'", index)
    kind = entry["kind"]
    if kind not in LAYER_KINDS:
        raise ManifestError(f"unknown layer kind {kind!r}", index)
    p = entry.get("params", {})
    try:
        if kind in ("Conv2D", "Linear"):
            w = _tensor(blob, entry, "weights", p["weights_shape"], index)
            b = _tensor(blob, entry, "bias", (w.shape[0],), index) if p.get("has_bias") else None
            aq = tuple(p["act_quant"]) if p.get("act_quant") is not None else None
            if aq is not None:
                aq = (float(aq[0]), float(aq[1]), int(aq[2]))
            if kind == "Conv2D":
                return Conv2D(w, b, int(p.get("stride", 1)), int(p.get("padding", 0)), aq)
            return Linear(w, b, aq)
        if kind == "BatchNormInference":
            c = int(p["channels"])
            vec = {n: _tensor(blob, entry, n, (c,), index)
                   for n in ("mu", "sigma2", "gamma", "beta")}
            return BatchNorm(eps=float(p["eps"]), **vec)
        if kind == "SkipAdd":
            return SkipAdd(int(p["source_layer_index"]))
        return LAYER_KINDS[kind]()
    except KeyError as exc:
        raise ManifestError(f"{kind} params missing {exc}", index) from None
    except ShapeError as exc:
        raise ManifestError(f"{kind}: {exc}", index) from None


def manifest_to_model(manifest, blob):
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    if manifest.get("nnqf_version") != NNQF_VERSION:
        raise ManifestError(f"unsupported nnqf_version {manifest.get('nnqf_version')!r}")
    for key in ("name", "input_shape", "layers"):
        if key not in manifest:
            raise ManifestError(f"manifest missing {key!r}")
    layers = [_build_layer(e, blob, i) for i, e in enumerate(manifest["layers"])]
    return ModelGraph(manifest["name"], manifest["input_shape"], layers).validate()


def read_manifest(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None


def load_model(path):
    path = Path(path)
    manifest = read_manifest(path)
    blob_file = path.parent / manifest.get("blob_file", blob_path_for(path).name)
    raw = blob_file.read_bytes()
    if len(raw) % 4:
        raise BlobLengthError(f"{blob_file}: size {len(raw)} is not a multiple of 4 bytes")
    return manifest_to_model(manifest, np.frombuffer(raw, dtype=LE_F32))


def save_tensor(path, array, meta=None):
    """Manifest JSON at ``path`` plus a float32 blob at ``path + '.bin'``."""
    path = Path(path)
    array = np.ascontiguousarray(array, dtype=LE_F32)
    manifest = {"dims": list(array.shape), "blob_file": blob_path_for(path).name}
    if meta:
        manifest.update(meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path_for(path).write_bytes(array.tobytes())
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_tensor(path):
    path = Path(path)
    manifest = read_manifest(path)
    if "dims" not in manifest:
        raise ManifestError(f"{path}: missing 'dims'")
    blob_file = path.parent / manifest.get("blob_file", blob_path_for(path).name)
    raw = np.frombuffer(blob_file.read_bytes(), dtype=LE_F32)
    want = int(np.prod(manifest["dims"]))
    if raw.size != want:
        raise BlobLengthError(f"{blob_file}: dims {manifest['dims']} need {want} floats, "
                              f"file holds {raw.size}")
    return raw.astype(np.float32).reshape(manifest["dims"]), manifest


DATASET_MANIFEST = "dataset.json"


def save_dataset(directory, batches):
    """One tensor file per batch plus ``dataset.json`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, b in enumerate(batches):
        name = f"batch{i:04d}.tensor"
        save_tensor(directory / name, b)
        files.append(name)
    (directory / DATASET_MANIFEST).write_text(
        json.dumps({"files": files}, indent=1) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory):
    directory = Path(directory)
    mpath = directory / DATASET_MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"{directory}: no {DATASET_MANIFEST}")
    manifest = read_manifest(mpath)
    files = manifest.get("files")
    if not isinstance(files, list) or not files:
        raise ManifestError(f"{mpath}: 'files' must be a non-empty list")
    return [load_tensor(directory / f)[0] for f in files]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
