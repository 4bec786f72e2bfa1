"""Model container files.

Layout: a UTF-8 text header followed by raw parameter buffers.

    blockattn-model v1
    [config]
    key=value            (one per line, sorted by key)
    [params]
    path:dim,dim,...:dtype   (manifest, one per parameter, store order)
    [data]
    <raw little-endian IEEE-754 buffers, concatenated in manifest order>

Buffers are written in C order, always little-endian, so a round trip is
bit-exact on any host.  Parameter kinds are not stored; they are recovered
from the path (see :func:`infer_kind`).
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore

MAGIC = "blockattn-model"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def infer_kind(path: str) -> str:
    """Parameter kind from the path convention used by the initializers:
    embedding tables live under ``emb/`` (or end in ``table``), bias vectors'
    final segment starts with ``b``, everything else is a weight matrix."""
    last = path.rsplit("/", 1)[-1]
    if path.startswith("emb/") or last == "table":
        return "embedding"
    if last.startswith("b"):
        return "bias"
    return "weight"


def coerce_scalar(text: str):
    """int if it looks like one, else float, else the string itself."""
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def save_model(path, store: ParamStore, config: dict) -> None:
    lines = [f"{MAGIC} v{FORMAT_VERSION}", "[config]"]
    for key in sorted(config):
        text = str(config[key])
        if "=" in key or "\n" in key or "\n" in text:
            raise ValueError(f"config entry {key!r} cannot be serialized")
        lines.append(f"{key}={text}")
    lines.append("[params]")
    buffers = []
    for name, value in store.values.items():
        if ":" in name or "\n" in name:
            raise ValueError(f"parameter path {name!r} cannot be serialized")
        dtype = str(value.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported parameter dtype {dtype}")
        dims = ",".join(str(d) for d in value.shape)
        lines.append(f"{name}:{dims}:{dtype}")
        buffers.append(np.ascontiguousarray(value, dtype=_DTYPES[dtype]))
    lines.append("[data]")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for buf in buffers:
            fh.write(buf.tobytes())


def load_model(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\n[data]\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ValueError("not a model container: missing [data] section")
    header = blob[:cut].decode("utf-8").split("\n")
    payload = blob[cut + len(marker):]

    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise ValueError("not a model container: bad magic line")
    if first[1] != f"v{FORMAT_VERSION}":
        raise ValueError(f"unsupported container version {first[1]}")
    try:
        config_at = header.index("[config]")
        params_at = header.index("[params]")
    except ValueError:
        raise ValueError("model container header is missing a section") from None

    config = {}
    for line in header[config_at + 1:params_at]:
        key, _, text = line.partition("=")
        config[key] = coerce_scalar(text)

    store = ParamStore()
    offset = 0
    for line in header[params_at + 1:]:
        try:
            name, dims, dtype_name = line.split(":")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            le_dtype = _DTYPES[dtype_name]
        except (ValueError, KeyError):
            raise ValueError(f"bad manifest line: {line!r}") from None
        size = int(np.prod(shape, dtype=np.int64)) * np.dtype(le_dtype).itemsize
        if offset + size > len(payload):
            raise ValueError(f"container truncated inside buffer for {name}")
        flat = np.frombuffer(payload, dtype=le_dtype, count=int(np.prod(shape, dtype=np.int64)),
                             offset=offset)
        store.add(name, flat.reshape(shape).astype(dtype_name, copy=True), infer_kind(name))
        offset += size
    if offset != len(payload):
        raise ValueError(f"{len(payload) - offset} trailing bytes after last buffer")
    return store, config
