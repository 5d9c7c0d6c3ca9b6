"""Parameter checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive: one array per parameter or
buffer path (``param/<path>`` and ``buffer/<path>``) holding the raw values
with their shape and dtype, plus ``__meta__``, a JSON document carrying
``schema_version`` and caller metadata.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

SCHEMA_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None,
                    meta: dict[str, Any] | None = None) -> None:
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    arrays.update({f"buffer/{k}": np.asarray(v) for k, v in (buffers or {}).items()})
    doc = {"schema_version": SCHEMA_VERSION, "meta": meta or {}}
    arrays["__meta__"] = np.array(json.dumps(doc, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, Any]]:
    params, buffers = {}, {}
    with np.load(path, allow_pickle=False) as z:
        doc = json.loads(str(z["__meta__"]))
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')}")
        for key in z.files:
            if key.startswith("param/"):
                params[key[6:]] = z[key]
            elif key.startswith("buffer/"):
                buffers[key[7:]] = z[key]
    return params, buffers, doc["meta"]
