"""Plain-text checkpoints of named tensors.

Format (UTF-8, line oriented)::

    # shillab-checkpoint 1
    meta <key> <json value>          (zero or more)
    tensor <name> <ndim> <d1> ... <dn>
    <row values, space separated, repr precision>   (one line per leading-axis row;
                                                     a single line for 0-d/1-d tensors)

Tensors appear in the order they were saved.  Values round-trip exactly
because floats are written with ``repr``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MAGIC = "# shillab-checkpoint 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for key, val in (meta or {}).items():
        lines.append(f"meta {key} {json.dumps(val, sort_keys=True)}")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
        rows = arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(arr.shape[0], -1)
        for row in rows:
            lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns (tensors, meta)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    tensors, meta = {}, {}
    pos = 1
    while pos < len(lines):
        head = lines[pos].split(" ", 2)
        pos += 1
        if head[0] == "meta":
            meta[head[1]] = json.loads(head[2])
            continue
        if head[0] != "tensor":
            raise CheckpointError(f"line {pos}: expected 'tensor' or 'meta'")
        fields = lines[pos - 1].split()
        name, ndim = fields[1], int(fields[2])
        shape = tuple(int(d) for d in fields[3:3 + ndim])
        n_rows = 1 if ndim < 2 else shape[0]
        vals = []
        for row in lines[pos:pos + n_rows]:
            vals.extend(float(x) for x in row.split())
        pos += n_rows
        size = int(np.prod(shape)) if shape else 1
        if len(vals) != size:
            raise CheckpointError(f"tensor {name}: expected {size} values, found {len(vals)}")
        tensors[name] = np.array(vals, dtype=np.float64).reshape(shape)
    return tensors, meta


# -- model adapters ----------------------------------------------------------------

def save_encoder(path, state) -> None:
    save_checkpoint(path, state.arrays(), {"kind": "encoder", "hidden_size": state.hidden_size,
                                           "slope": state.slope, "dropout": state.dropout})


def load_encoder(path):
    from . import numcore as nc
    from .encoder import PARAM_NAMES, EncoderState
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "encoder":
        raise CheckpointError("not an encoder checkpoint")
    params = {k: nc.param(tensors[k]) for k in PARAM_NAMES}
    return EncoderState(params, meta["hidden_size"], meta["slope"], meta["dropout"])


def save_victim(path, model) -> None:
    from .victims import ItemCFModel, WMFModel
    if isinstance(model, WMFModel):
        save_checkpoint(path, {"X": model.X, "Y": model.Y},
                        {"kind": "wmf", "alpha": model.alpha, "reg": model.reg})
    elif isinstance(model, ItemCFModel):
        K = model.neighbours.tocoo()
        save_checkpoint(path, {"rows": K.row, "cols": K.col, "vals": K.data, "sim": model.sim},
                        {"kind": "itemcf", "n_sim": model.n_sim})
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def load_victim(path):
    from .victims import ItemCFModel, WMFModel
    t, meta = load_checkpoint(path)
    if meta.get("kind") == "wmf":
        return WMFModel(t["X"], t["Y"], meta["alpha"], meta["reg"])
    if meta.get("kind") == "itemcf":
        m = t["sim"].shape[0]
        K = sp.csr_matrix((t["vals"], (t["rows"].astype(np.int64), t["cols"].astype(np.int64))), shape=(m, m))
        return ItemCFModel(t["sim"], int(meta["n_sim"]), K)
    raise CheckpointError("unknown checkpoint kind")
