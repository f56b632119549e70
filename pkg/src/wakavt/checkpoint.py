"""Single-file checkpoint archive with bit-exact parameter round-trips.

Layout: a UTF-8 text manifest followed by raw little-endian float64
payloads. The manifest is

    line 1: ``wakavt-checkpoint 1``
    line 2: a JSON object with run metadata (step counter, model config,
            vocabulary, anything else the caller wants to pin)
    line 3: entry count
    then one line per entry: ``name<TAB>label<TAB>shape<TAB>offset<TAB>nbytes``
    terminator: a single ``.`` line

Offsets are relative to the first byte after the terminator line. Arrays
are stored C-order as ``<f8`` so a reload reproduces every bit, and the
manifest deliberately contains nothing volatile (no timestamps, no host
info): two saves of the same state are byte-identical files.

Entry labels record the parameter partition (``theta``/``phi_r``/
``phi_p``/``xi``) or ``opt`` for optimizer slots.
"""

from __future__ import annotations

import json
from typing import Dict, Tuple

import numpy as np

from wakavt.tensor import ParameterStore

MAGIC = "wakavt-checkpoint 1"
OPT_LABEL = "opt"


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def save_checkpoint(
    path: str,
    store: ParameterStore,
    meta: dict,
    opt_arrays: Dict[str, np.ndarray] | None = None,
) -> None:
    """Write parameters, optimizer slots, and metadata to ``path``.

    ``meta`` must be JSON-serializable; ``opt_arrays`` maps slot names
    (e.g. ``m/enc.w``) to float64 arrays saved under the ``opt`` label.
    """
    entries = []  # (name, label, array)
    for name in store.paths():
        entries.append((name, store.partition(name), store[name].data))
    for name in sorted(opt_arrays or {}):
        entries.append((name, OPT_LABEL, np.asarray(opt_arrays[name], dtype=np.float64)))

    payloads = []
    offset = 0
    lines = [MAGIC, json.dumps(meta, sort_keys=True), str(len(entries))]
    for name, label, arr in entries:
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"entry name {name!r} contains reserved characters")
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{label}\t{shape}\t{offset}\t{len(blob)}")
        payloads.append(blob)
        offset += len(blob)
    lines.append(".")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(
    path: str,
) -> Tuple[Dict[str, Tuple[str, np.ndarray]], dict, Dict[str, np.ndarray]]:
    """Read an archive back.

    Returns ``(params, meta, opt_arrays)`` where ``params`` maps each
    parameter name to ``(partition_label, float64 array)``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = 0
    lines = []
    view = raw
    while True:
        nl = view.find(b"\n", header_end)
        if nl < 0:
            raise CheckpointError("truncated manifest")
        line = view[header_end:nl].decode("utf-8")
        header_end = nl + 1
        if line == ".":
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    try:
        meta = json.loads(lines[1])
        n_entries = int(lines[2])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"bad manifest header: {exc}") from None
    if len(lines) - 3 != n_entries:
        raise CheckpointError(
            f"manifest lists {n_entries} entries but has {len(lines) - 3} lines"
        )
    body = raw[header_end:]
    params: Dict[str, Tuple[str, np.ndarray]] = {}
    opt: Dict[str, np.ndarray] = {}
    for line in lines[3:]:
        parts = line.split("\t")
        if len(parts) != 5:
            raise CheckpointError(f"bad entry line: {line!r}")
        name, label, shape_s, off_s, nbytes_s = parts
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        off, nbytes = int(off_s), int(nbytes_s)
        blob = body[off : off + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"payload for {name!r} is truncated")
        arr = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
        if label == OPT_LABEL:
            opt[name] = arr
        else:
            params[name] = (label, arr)
    return params, meta, opt


def restore_store(params: Dict[str, Tuple[str, np.ndarray]]) -> ParameterStore:
    """Build a fresh ParameterStore holding the loaded parameters."""
    store = ParameterStore()
    for name, (label, arr) in params.items():
        store.add(name, arr, label)
    return store


def load_into_store(path: str, store: ParameterStore) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Overwrite an existing store's values in place (shapes must match).

    Used to resume training: the store built by the model constructor
    supplies the topology, the checkpoint supplies the numbers.
    """
    params, meta, opt = load_checkpoint(path)
    missing = set(store.paths()) - set(params)
    extra = set(params) - set(store.paths())
    if missing or extra:
        raise CheckpointError(
            f"parameter names disagree (missing={sorted(missing)[:3]}, "
            f"unexpected={sorted(extra)[:3]})"
        )
    for name, (label, arr) in params.items():
        tensor = store[name]
        if tensor.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: {tensor.data.shape} vs {arr.shape}"
            )
        if store.partition(name) != label:
            raise CheckpointError(f"partition mismatch for {name!r}")
        tensor.data = arr
    return meta, opt
