"""On-disk formats: datasets (binary and CSV), checkpoints, JSON artifacts.

Binary containers share one layout: an 8-byte magic, a little-endian uint64
header length, a UTF-8 JSON header, then raw little-endian array payloads in
header order.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .synthgen import Dataset

DATASET_MAGIC = b"ACIDDSET"
CHECKPOINT_MAGIC = b"ACIDCKPT"
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _write_container(path, magic: bytes, header: dict, payloads: Sequence[bytes]) -> None:
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for p in payloads:
            f.write(p)


def _read_container(path, magic: bytes) -> tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    return header, memoryview(raw)[16 + hlen :]


# -- datasets ---------------------------------------------------------------

def write_dataset(ds: Dataset, path) -> None:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "n": ds.n, "dX": ds.dx, "dY": ds.dy, "dZ": ds.dz,
        "label": ds.label, "seed": ds.seed, "model_id": ds.model_id,
        "meta": ds.meta,
    }
    payload = [np.ascontiguousarray(m, dtype="<f8").tobytes() for m in (ds.x, ds.y, ds.z)]
    _write_container(path, DATASET_MAGIC, header, payload)


def read_dataset(path) -> Dataset:
    h, body = _read_container(path, DATASET_MAGIC)
    if h.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset format_version {h.get('format_version')}")
    n = h["n"]
    arrays, off = [], 0
    for d in (h["dX"], h["dY"], h["dZ"]):
        size = n * d * 8
        if off + size > len(body):
            raise FormatError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(body[off : off + size], dtype="<f8").reshape(n, d).copy())
        off += size
    return Dataset(*arrays, label=h.get("label"), seed=h.get("seed"), model_id=h.get("model_id"),
                   meta=h.get("meta") or {})


def write_dataset_csv(ds: Dataset, path, sidecar: bool = True) -> None:
    cols = [f"x{i}" for i in range(ds.dx)] + [f"y{i}" for i in range(ds.dy)] + [f"z{i}" for i in range(ds.dz)]
    data = np.hstack([ds.x, ds.y, ds.z])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    if sidecar:
        meta = {"label": ds.label, "seed": ds.seed, "model_id": ds.model_id, "meta": ds.meta}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def read_csv_table(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix; unparsable or empty cells become NaN."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [c.strip() for c in rows[0]]

    def num(s):
        try:
            return float(s)
        except ValueError:
            return float("nan")

    data = np.array([[num(c) for c in r] for r in rows[1:] if r], dtype=np.float64)
    return header, data.reshape(-1, len(header))


def read_dataset_csv(path, x_cols=None, y_cols=None, z_cols=None) -> Dataset:
    """Load a CSV dataset.

    Without an explicit mapping, columns must follow the ``x0.., y0.., z0..``
    naming. Column selectors are names or integer positions.
    """
    header, data = read_csv_table(path)

    def pick(sel, prefix):
        if sel is None:
            idx = [i for i, c in enumerate(header) if c.startswith(prefix) and c[1:].isdigit()]
            if not idx:
                raise FormatError(f"{path}: no {prefix}* columns and no explicit mapping")
            return idx
        out = []
        for s in sel:
            s = str(s).strip()
            if s in header:
                out.append(header.index(s))
            elif s.lstrip("-").isdigit():
                out.append(int(s))
            else:
                raise FormatError(f"{path}: unknown column {s!r}")
        return out

    ix, iy, iz = pick(x_cols, "x"), pick(y_cols, "y"), pick(z_cols, "z")
    sub = data[:, ix + iy + iz]
    if not np.isfinite(sub).all():
        raise FormatError(f"{path}: NaN or non-numeric cells in the selected columns")
    meta_path = Path(str(path) + ".meta.json")
    extra = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Dataset(data[:, ix], data[:, iy], data[:, iz], label=extra.get("label"),
                   seed=extra.get("seed"), model_id=extra.get("model_id"), meta=extra.get("meta") or {})


def load_dataset(path, **csv_kw) -> Dataset:
    if str(path).endswith(".csv"):
        return read_dataset_csv(path, **csv_kw)
    return read_dataset(path)


# -- checkpoints ------------------------------------------------------------

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}


def _tensor_block(tensors: dict[str, torch.Tensor], np_dtype: str) -> tuple[list, bytes]:
    manifest, chunks = [], []
    for name, t in tensors.items():
        manifest.append([name, list(t.shape)])
        chunks.append(t.detach().cpu().numpy().astype(np_dtype, copy=False).tobytes())
    return manifest, b"".join(chunks)


def _untensor_block(manifest, body: memoryview, off: int, np_dtype: str, torch_dtype) -> tuple[dict, int]:
    out = {}
    item = np.dtype(np_dtype).itemsize
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body[off : off + count * item], dtype=np_dtype).reshape(shape)
        out[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
        off += count * item
    return out, off


def save_checkpoint(path, model, *, step: int = 0, optimizer_state=None, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write model parameters, optimizer moments and RNG state.

    The payload precision follows the model (float32 for training runs).
    """
    dtype_name = "float64" if model.dtype == torch.float64 else "float32"
    np_dtype = _DTYPES[dtype_name][1]
    params = dict(model.named_parameters())
    manifest, pbytes = _tensor_block(params, np_dtype)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "dtype": dtype_name,
        "parameters": manifest,
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blobs = [pbytes]
    if optimizer_state is not None:
        mm, mbytes = _tensor_block({f"m.{k}": v for k, v in optimizer_state.m.items()}, np_dtype)
        vm, vbytes = _tensor_block({f"v.{k}": v for k, v in optimizer_state.v.items()}, np_dtype)
        header["optimizer"] = {"t": optimizer_state.t, "m": mm, "v": vm}
        blobs += [mbytes, vbytes]
    _write_container(path, CHECKPOINT_MAGIC, header, blobs)


def load_checkpoint(path):
    """Returns ``(model, info)``; ``info`` holds step, rng_state, optimizer state and extras."""
    from .model import ACID, ModelConfig
    from .trainer import AdamState

    h, body = _read_container(path, CHECKPOINT_MAGIC)
    if h.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format_version {h.get('format_version')}")
    torch_dtype, np_dtype = _DTYPES[h["dtype"]]
    model = ACID(ModelConfig.from_dict(h["model_config"])).to(torch_dtype)
    params, off = _untensor_block(h["parameters"], body, 0, np_dtype, torch_dtype)
    own = dict(model.named_parameters())
    if set(params) != set(own):
        raise FormatError(f"{path}: parameter manifest does not match the model layout")
    with torch.no_grad():
        for name, t in params.items():
            if tuple(t.shape) != tuple(own[name].shape):
                raise FormatError(f"{path}: shape mismatch for {name}")
            own[name].copy_(t)
    opt = None
    if "optimizer" in h:
        o = h["optimizer"]
        m, off = _untensor_block(o["m"], body, off, np_dtype, torch_dtype)
        v, off = _untensor_block(o["v"], body, off, np_dtype, torch_dtype)
        opt = AdamState(t=o["t"], m={k[2:]: t for k, t in m.items()}, v={k[2:]: t for k, t in v.items()})
    info = {"step": h["step"], "rng_state": h.get("rng_state"), "optimizer": opt, "extra": h.get("extra", {})}
    return model, info


# -- misc -------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, bytes):
        return base64.b64encode(o).decode()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def torch_generator_state(g: torch.Generator) -> str:
    return base64.b64encode(bytes(g.get_state().numpy())).decode()


def set_torch_generator_state(g: torch.Generator, state: str) -> None:
    g.set_state(torch.frombuffer(bytearray(base64.b64decode(state)), dtype=torch.uint8))
