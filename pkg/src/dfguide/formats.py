"""File formats: pmf and sample CSVs, 16-bit PGM heatmaps, the DFMP model container, JSON."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .statespace import Pmf, StateSpace

MAGIC = b"DFMP"
CONTAINER_VERSION = 1


class FormatError(ValueError):
    pass


# -- CSV ------------------------------------------------------------------------

def write_pmf_csv(path, pmf: Pmf) -> None:
    """Rows of (index, s0 .. s{D-1}, weight) for every state with non-zero weight."""
    space = pmf.space
    idx = np.flatnonzero(pmf.weights)
    states = space.state_of(idx)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index"] + [f"s{d}" for d in range(space.dims)] + ["weight"])
        for i, s in zip(idx, states):
            w.writerow([int(i)] + [int(v) for v in s] + [repr(float(pmf.weights[i]))])


def read_pmf_csv(path, space: StateSpace) -> Pmf:
    weights = np.zeros(space.n_states)
    with open(path, newline="") as f:
        rows = csv.reader(f)
        header = next(rows)
        if header[0] != "index" or header[-1] != "weight" or len(header) != space.dims + 2:
            raise FormatError(f"{path}: not a pmf CSV for a {space.dims}-dimensional space")
        for row in rows:
            state = np.array([int(v) for v in row[1:-1]])
            weights[int(space.index_of(space.validate_states(state[None]))[0])] = float(row[-1])
    return Pmf.from_unnormalized(space, weights)


def write_samples_csv(path, states: np.ndarray) -> None:
    states = np.asarray(states, dtype=np.int64)
    header = "chain_id," + ",".join(f"d_{d}" for d in range(states.shape[1]))
    body = np.column_stack([np.arange(states.shape[0]), states])
    np.savetxt(path, body, fmt="%d", delimiter=",", header=header, comments="")


def read_samples_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return data[:, 1:]


def write_curve_csv(path, columns: dict) -> None:
    names = list(columns)
    n = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step"] + names)
        for i in range(n):
            w.writerow([i] + [repr(float(columns[c][i])) if i < len(columns[c]) else "" for c in names])


# -- PGM --------------------------------------------------------------------------

def to_u16(grid: np.ndarray) -> np.ndarray:
    """Max-normalize a non-negative grid to 0..65535."""
    g = np.asarray(grid, dtype=float)
    top = g.max(initial=0.0)
    if top <= 0:
        return np.zeros(g.shape, dtype=np.uint16)
    return np.round(np.clip(g, 0.0, None) / top * 65535.0).astype(np.uint16)


def write_pgm(path, grid: np.ndarray, normalize: bool = True) -> None:
    """Binary 16-bit PGM (P5, big-endian), row-major with the first coordinate as row."""
    img = to_u16(grid) if normalize else np.asarray(grid, dtype=np.uint16)
    if img.ndim != 2:
        raise FormatError("PGM needs a 2-D grid")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM")
    return np.frombuffer(data, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def panel_grid(panels: Sequence[Sequence[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile per-panel grids (each max-normalized separately) into one image; empty slots stay black."""
    rows = len(panels)
    cols = max(len(r) for r in panels)
    ph = max(p.shape[0] for r in panels for p in r if p is not None)
    pw = max(p.shape[1] for r in panels for p in r if p is not None)
    out = np.zeros((rows * ph + (rows + 1) * pad, cols * pw + (cols + 1) * pad), dtype=np.uint16)
    for i, r in enumerate(panels):
        for j, p in enumerate(r):
            if p is None:
                continue
            y = pad + i * (ph + pad)
            x = pad + j * (pw + pad)
            out[y : y + p.shape[0], x : x + p.shape[1]] = to_u16(p)
    return out


# -- model container ----------------------------------------------------------------

def save_container(path, backend: str, array: np.ndarray, sidecar: dict) -> None:
    """DFMP container plus a ``<path>.json`` sidecar holding the config."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    tag = backend.encode("ascii")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        f.write(struct.pack("<B", len(tag)) + tag)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())
    write_json(str(path) + ".json", sidecar)


def load_container(path) -> tuple[str, np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    off = 8
    (tlen,) = struct.unpack_from("<B", data, off)
    off += 1
    tag = data[off : off + tlen].decode("ascii")
    off += tlen
    (ndim,) = struct.unpack_from("<I", data, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    payload = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return tag, payload, sidecar


# -- JSON ---------------------------------------------------------------------------

def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")
