"""Single-file checkpoint container.

Byte layout: an 8-byte little-endian unsigned manifest length, the UTF-8
JSON manifest, zero padding to a 64-byte boundary, then raw little-endian
tensor blobs, each starting at a 64-byte boundary.  The manifest lists
every blob's name, dtype, shape, and absolute offset, so the file is
readable without this module.  Weights are float32; per-point ranges are
stored as `<point>.x_min` / `<point>.x_max` bucket-shaped tensors.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, QuantTransformer

FORMAT_VERSION = 1
_ALIGN = 64

_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(RuntimeError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise CheckpointError(f"unsupported blob dtype {arr.dtype}")


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def save_checkpoint(path, model: QuantTransformer, step: int = 0,
                    metrics: dict | None = None, optimizer=None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[f"param.{name}"] = p.data
    point_meta = {}
    for name, pt in model.points.items():
        meta = {"enabled": pt.cfg.enabled, "kind": pt.cfg.kind}
        if pt.tracker is not None:
            meta.update(initialized=pt.tracker.initialized, frozen=pt.tracker.frozen,
                        update_count=pt.tracker.update_count)
            if pt.tracker.initialized:
                tensors[f"point.{name}.x_min"] = pt.tracker.x_min
                tensors[f"point.{name}.x_max"] = pt.tracker.x_max
        elif pt.weight_params is not None:
            meta["frozen"] = True
            tensors[f"point.{name}.x_min"] = np.asarray(pt.weight_params.x_min, dtype=np.float32)
            tensors[f"point.{name}.x_max"] = np.asarray(pt.weight_params.x_max, dtype=np.float32)
        point_meta[name] = meta
    opt_meta = None
    if optimizer is not None:
        st = optimizer.state()
        opt_meta = {"type": type(optimizer).__name__.lower(), "t": st.get("t", 0)}
        for n, arr in st.get("m", {}).items():
            tensors[f"opt.m.{n}"] = arr
        for n, arr in st.get("v", {}).items():
            tensors[f"opt.v.{n}"] = arr

    names = sorted(tensors)
    entries = []
    header_guess = 0
    # two passes: offsets depend on manifest length, which depends on offsets;
    # fix by padding the manifest with spaces to a stable length
    for attempt in range(8):
        offset = 8 + header_guess + _pad(8 + header_guess)
        entries = []
        for n in names:
            arr = np.ascontiguousarray(tensors[n])
            nbytes = arr.size * arr.itemsize
            entries.append({"name": n, "dtype": _dtype_code(arr),
                            "shape": [int(s) for s in arr.shape],
                            "offset": offset, "nbytes": int(nbytes)})
            offset += nbytes + _pad(nbytes)
        manifest = {
            "format_version": FORMAT_VERSION,
            "model_config": asdict(model.cfg),
            "bucketing": model.bucketing,
            "naive": model.naive,
            "ff_dims": model.ff_dims,
            "step": int(step),
            "metrics": metrics or {},
            "points": point_meta,
            "optimizer": opt_meta,
            "dropout_rng": model.dropout_rng.get_state(),
            "tensors": entries,
        }
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        if len(blob) == header_guess:
            break
        header_guess = len(blob)
    else:
        raise CheckpointError("manifest length failed to stabilize")

    with open(path, "wb") as f:
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(b"\0" * _pad(8 + len(blob)))
        for e in entries:
            arr = np.ascontiguousarray(tensors[e["name"]]).astype(_DTYPES[e["dtype"]])
            assert f.tell() == e["offset"]
            f.write(arr.tobytes())
            f.write(b"\0" * _pad(e["nbytes"]))


class Checkpoint:
    def __init__(self, manifest: dict, tensors: dict[str, np.ndarray]):
        self.manifest = manifest
        self.tensors = tensors

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def metrics(self) -> dict:
        return self.manifest["metrics"]

    def build_model(self) -> QuantTransformer:
        m = self.manifest
        ff_dims = m["ff_dims"]
        cfg = ModelConfig(**m["model_config"])
        model = QuantTransformer(cfg, seed=0, bucketing=m["bucketing"],
                                 naive=m["naive"], ff_dims=ff_dims)
        for name, p in model.params.items():
            key = f"param.{name}"
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            if tuple(p.data.shape) != tuple(self.tensors[key].shape):
                raise CheckpointError(f"shape mismatch for {key}")
            p.data = self.tensors[key].astype(np.float32).copy()
        for name, meta in m["points"].items():
            pt = model.points[name]
            pt.cfg.enabled = bool(meta["enabled"])
            lo = self.tensors.get(f"point.{name}.x_min")
            hi = self.tensors.get(f"point.{name}.x_max")
            if pt.tracker is not None and meta.get("initialized"):
                pt.tracker.load_state({
                    "x_min": lo, "x_max": hi,
                    "initialized": True,
                    "frozen": meta["frozen"],
                    "update_count": meta["update_count"],
                })
            elif pt.cfg.kind == "weight" and lo is not None and not pt.cfg.quantize_once:
                from .quant import QuantParams
                pt.weight_params = QuantParams(pt.cfg.k, lo, hi)
        model.dropout_rng.set_state(self.manifest["dropout_rng"])
        return model

    def load_optimizer(self, optimizer) -> None:
        meta = self.manifest.get("optimizer")
        if meta is None:
            raise CheckpointError("checkpoint has no optimizer state")
        st = {"t": meta["t"], "m": {}, "v": {}}
        for key, arr in self.tensors.items():
            if key.startswith("opt.m."):
                st["m"][key[6:]] = arr
            elif key.startswith("opt.v."):
                st["v"][key[6:]] = arr
        optimizer.load_state(st)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    n = int.from_bytes(raw[:8], "little")
    try:
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} "
            f"not supported (expected {FORMAT_VERSION})")
    tensors = {}
    for e in manifest["tensors"]:
        buf = raw[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return Checkpoint(manifest, tensors)
