"""On-disk formats: a small binary array container plus JSON sidecars.

Bundle layout (little-endian throughout):

    8 bytes   magic  b"MLBUNDLE"
    u32       format version (currently 1)
    u32       header length in bytes
    header    canonical UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype, shape}...]}
    payload   raw row-major array bytes, in header order (names sorted)

Saving the same object twice produces byte-identical files: the header JSON
is canonical (sorted keys, fixed separators) and arrays are ordered by name.
Configs, coefficient matrices and manifests are plain JSON; float64 values
survive the JSON round trip exactly because Python prints shortest
round-trip representations.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from typing import Mapping

import numpy as np

from .engine import LayerParams, ParamSet, ShapeError
from .merging import CoefficientMatrix, TrainableLayer
from .suites import SuiteConfig, TaskData, TaskSuite

MAGIC = b"MLBUNDLE"
BUNDLE_VERSION = 1
MANIFEST_VERSION = 1

_DTYPES = {"float64": "<f8", "int64": "<i8"}


class BundleError(ValueError):
    """Corrupt, truncated or incompatible bundle file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_bundle(path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    entries = []
    payload = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == np.float64:
            dtype = "float64"
        elif a.dtype == np.int64:
            dtype = "int64"
        else:
            raise BundleError(f"unsupported dtype {a.dtype} for array '{name}'")
        entries.append({"name": name, "dtype": dtype, "shape": list(a.shape)})
        payload.append(a.astype(_DTYPES[dtype]).tobytes(order="C"))
    header = canonical_json({"meta": dict(meta), "arrays": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", BUNDLE_VERSION, len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load_bundle(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise BundleError(f"{path}: not a bundle file (bad magic)")
    if len(blob) < 16:
        raise BundleError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != BUNDLE_VERSION:
        raise BundleError(f"{path}: unsupported bundle version {version}")
    if len(blob) < 16 + header_len:
        raise BundleError(f"{path}: truncated header")
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    arrays = {}
    offset = 16 + header_len
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise BundleError(f"{path}: truncated payload for array '{entry['name']}'")
        a = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = a.astype(entry["dtype"])
        offset += nbytes
    if offset != len(blob):
        raise BundleError(f"{path}: {len(blob) - offset} trailing bytes")
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# Checkpoints (ParamSet)


def save_checkpoint(params: ParamSet, path, extra_meta: Mapping | None = None) -> None:
    meta = {
        "format": "paramset",
        "encoder": [[l.out_dim, l.in_dim] for l in params.encoder],
        "heads": {t: [h.out_dim, h.in_dim] for t, h in params.heads.items()},
    }
    if extra_meta:
        meta["extra"] = dict(extra_meta)
    arrays = {}
    for i, layer in enumerate(params.encoder):
        arrays[f"enc{i}.w"] = layer.weight
        arrays[f"enc{i}.b"] = layer.bias
    for task, head in params.heads.items():
        arrays[f"head.{task}.w"] = head.weight
        arrays[f"head.{task}.b"] = head.bias
    save_bundle(path, meta, arrays)


def load_checkpoint(path) -> ParamSet:
    meta, arrays = load_bundle(path)
    if meta.get("format") != "paramset":
        raise BundleError(f"{path}: not a parameter checkpoint")
    encoder = []
    for i, (out_dim, in_dim) in enumerate(meta["encoder"]):
        w, b = arrays[f"enc{i}.w"], arrays[f"enc{i}.b"]
        if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
            raise BundleError(f"{path}: encoder layer {i} shape mismatch between header and data")
        encoder.append(LayerParams(w, b))
    heads = {}
    for task, (out_dim, in_dim) in meta["heads"].items():
        w, b = arrays[f"head.{task}.w"], arrays[f"head.{task}.b"]
        if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
            raise BundleError(f"{path}: head '{task}' shape mismatch between header and data")
        heads[task] = LayerParams(w, b)
    try:
        return ParamSet(encoder=tuple(encoder), heads=heads)
    except ShapeError as exc:
        raise BundleError(f"{path}: inconsistent shapes: {exc}") from exc


# ---------------------------------------------------------------------------
# Task suites


def save_suite(suite: TaskSuite, path) -> None:
    meta = {
        "format": "suite",
        "config": asdict(suite.config),
        "tasks": [{"id": t.task_id, "kind": t.kind} for t in suite.tasks],
    }
    arrays = {}
    for t in suite.tasks:
        arrays[f"{t.task_id}.x_train"] = t.x_train
        arrays[f"{t.task_id}.x_test"] = t.x_test
        if t.kind == "classification":
            arrays[f"{t.task_id}.y_train"] = t.y_train.astype(np.int64)
            arrays[f"{t.task_id}.y_test"] = t.y_test.astype(np.int64)
        else:
            arrays[f"{t.task_id}.y_train"] = t.y_train
            arrays[f"{t.task_id}.y_test"] = t.y_test
    save_bundle(path, meta, arrays)


def load_suite(path) -> TaskSuite:
    meta, arrays = load_bundle(path)
    if meta.get("format") != "suite":
        raise BundleError(f"{path}: not a suite file")
    cfg_dict = dict(meta["config"])
    cfg_dict["regression_tasks"] = tuple(cfg_dict.get("regression_tasks", ()))
    cfg = SuiteConfig(**cfg_dict)
    tasks = []
    for entry in meta["tasks"]:
        tid = entry["id"]
        tasks.append(TaskData(
            task_id=tid,
            kind=entry["kind"],
            x_train=arrays[f"{tid}.x_train"],
            y_train=arrays[f"{tid}.y_train"],
            x_test=arrays[f"{tid}.x_test"],
            y_test=arrays[f"{tid}.y_test"],
        ))
    return TaskSuite(config=cfg, tasks=tasks)


# ---------------------------------------------------------------------------
# Coefficient matrices (JSON) and trainable layers (bundle)


def save_coeffs(coeffs: CoefficientMatrix, path) -> None:
    doc = {
        "format": "coeffs",
        "task_ids": list(coeffs.task_ids),
        "num_layers": coeffs.num_layers,
        "values": [[float(v) for v in row] for row in coeffs.values],
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(doc))


def load_coeffs(path) -> CoefficientMatrix:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != "coeffs":
        raise BundleError(f"{path}: not a coefficient file")
    values = np.asarray(doc["values"], dtype=np.float64)
    if values.shape != (len(doc["task_ids"]), doc["num_layers"]):
        raise BundleError(f"{path}: coefficient shape does not match header")
    return CoefficientMatrix(tuple(doc["task_ids"]), values)


def save_trainable(trainable: Mapping[str, TrainableLayer], path) -> None:
    meta = {"format": "trainable", "selectors": {}}
    arrays = {}
    for task, tr in trainable.items():
        sel = tr.selector if tr.selector == "head" or isinstance(tr.selector, int) \
            else list(tr.selector)
        meta["selectors"][task] = sel
        layers = (tr.params,) if isinstance(tr.params, LayerParams) else tuple(tr.params)
        for pos, layer in enumerate(layers):
            arrays[f"{task}.{pos}.w"] = layer.weight
            arrays[f"{task}.{pos}.b"] = layer.bias
    save_bundle(path, meta, arrays)


def load_trainable(path) -> dict:
    meta, arrays = load_bundle(path)
    if meta.get("format") != "trainable":
        raise BundleError(f"{path}: not a trainable-layer file")
    out = {}
    for task, sel in meta["selectors"].items():
        if isinstance(sel, list):
            sel = tuple(int(i) for i in sel)
            layers = tuple(LayerParams(arrays[f"{task}.{p}.w"], arrays[f"{task}.{p}.b"])
                           for p in range(len(sel)))
            out[task] = TrainableLayer(sel, layers)
        else:
            out[task] = TrainableLayer(sel, LayerParams(arrays[f"{task}.0.w"], arrays[f"{task}.0.b"]))
    return out


# ---------------------------------------------------------------------------
# Run manifests


def manifest_payload(command: str, config: Mapping, seed: int) -> dict:
    from . import __version__
    return {
        "command": command,
        "config": dict(config),
        "seed": int(seed),
        "versions": {
            "package": __version__,
            "bundle_format": BUNDLE_VERSION,
            "manifest_format": MANIFEST_VERSION,
        },
    }


def manifest_hash(payload: Mapping) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def write_manifest(path, payload: Mapping) -> str:
    digest = manifest_hash(payload)
    doc = dict(payload)
    doc["manifest_hash"] = digest
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False))
        f.write("\n")
    return digest


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    body = {k: v for k, v in doc.items() if k != "manifest_hash"}
    if manifest_hash(body) != doc.get("manifest_hash"):
        raise BundleError(f"{path}: manifest hash does not match its contents")
    return doc
