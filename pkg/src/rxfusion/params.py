"""Named parameter store with zip checkpoints.

Parameters are leaf Tensors registered under slash-separated names.
Checkpoints are plain zip archives: one RXT1 entry per parameter plus a
JSON manifest recording names, shapes, and a config echo, so files can
be inspected with stock tools.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .containers import dumps_rxt, loads_rxt

MANIFEST_NAME = "manifest.json"


class ParamStore:
    """Flat registry of trainable tensors, ordered by insertion."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: int, rng) -> Tensor:
        """Init from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(
                f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for k, t in self._params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {k!r}: stored {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()


def save_checkpoint(
    path: Union[str, Path],
    store: ParamStore,
    config: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    """Write all parameters plus a manifest into one zip archive."""
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, t in store.items():
            arcname = name.replace("/", "__") + ".rxt"
            zf.writestr(arcname, dumps_rxt(t.data))
            entries.append(
                {"name": name, "file": arcname, "shape": list(t.data.shape)}
            )
        manifest = {
            "format": "rxfusion-checkpoint-v1",
            "params": entries,
            "config": config or {},
        }
        if extra:
            manifest["extra"] = extra
        zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    """Return (name -> array, manifest) from a checkpoint zip."""
    arrays: Dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
        for entry in manifest["params"]:
            arrays[entry["name"]] = loads_rxt(zf.read(entry["file"]))
    return arrays, manifest
