"""Named parameter registry plus on-disk checkpoints.

A checkpoint is a directory holding ``manifest.json`` (format version, dtype,
arbitrary config dict, and the name/shape/offset of every parameter) next to
``params.bin``, the concatenated raw little-endian float32 values.  Loading
restores every parameter bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor

FORMAT_VERSION = 1


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParamSet:
    """Ordered name -> Tensor mapping for everything the optimiser updates."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32):
        self._params: dict[str, Tensor] = {}
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def weight(self, name: str, shape, fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
        """Xavier-uniform weight. Default fans are the last two extents."""
        if fan_in is None:
            fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
        if fan_out is None:
            fan_out = shape[-1]
        return self.add(name, xavier_uniform(shape, fan_in, fan_out, self.rng, self.dtype))

    def bias(self, name: str, dim: int, fill: float = 0.0) -> Tensor:
        return self.add(name, np.full(dim, fill, dtype=self.dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy_values_from(self, other: "ParamSet") -> None:
        """Overwrite matching names in-place; extra names on either side are left alone."""
        for name, t in self._params.items():
            if name in other:
                src = other[name].data
                if src.shape != t.data.shape:
                    raise ShapeError(
                        f"parameter {name!r}: cannot copy shape {src.shape} into {t.data.shape}"
                    )
                t.data[...] = src

    def cast(self, dtype) -> "ParamSet":
        """A detached copy of the registry in another float dtype."""
        out = ParamSet(rng=self.rng, dtype=dtype)
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out


def save_checkpoint(path, params: ParamSet, config: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, t in params:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "config": config,
        "params": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path):
    """Return (config dict, ParamSet) from a checkpoint directory."""
    path = Path(path)
    manifest_file = path / "manifest.json"
    blob_file = path / "params.bin"
    if not manifest_file.is_file() or not blob_file.is_file():
        raise DataError(f"not a checkpoint directory: {path}")
    try:
        manifest = json.loads(manifest_file.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt checkpoint manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    blob = blob_file.read_bytes()
    params = ParamSet()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise DataError(f"checkpoint blob truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        params.add(entry["name"], arr.copy())
    return manifest["config"], params
