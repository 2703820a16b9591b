"""Morphable face model container, file formats and mesh neighborhoods.

Shapes are stored as ``3 x V`` arrays (rows x, y, z). Each deformation
component is a flattened ``3 x V`` displacement field, so a shape instance
is ``mean_shape + (alpha @ components).reshape(3, V)``.

Model frame convention: x points to image right, y points down, z points
away from the camera. A frontal face therefore looks towards ``-z``.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

MAGIC = b"C3DM"
FORMAT_VERSION = 1

OP_LABELS = ("eye_l", "eye_r", "nose", "ear_l", "ear_r")
N_OP = 5
N_LM68 = 68
N_CANTHI = 2

# Helen/iBUG 68 layout, 0-based. "Left" is the image-left side of a frontal face.
CONTOUR_SLICE = slice(0, 17)
LEFT_INNER_CANTHUS_LM = 39
RIGHT_INNER_CANTHUS_LM = 42


class ModelFormatError(ValueError):
    """Raised when a model file or array bundle violates the container contract."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray  # (3, V)
    components: np.ndarray  # (K, 3V)
    reg_weights: np.ndarray  # (K,)
    faces: np.ndarray  # (T, 3)
    op_indices: np.ndarray  # (5,)
    lm68_indices: np.ndarray  # (68,)
    canthus_indices: np.ndarray  # (2,)
    name: str = field(default="model", compare=False)

    def __post_init__(self):
        validate(self)
        for arr in (self.mean_shape, self.components, self.reg_weights, self.faces,
                    self.op_indices, self.lm68_indices, self.canthus_indices):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[1]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        """One-ring neighbor indices per vertex, derived from ``faces``."""
        return build_adjacency(self.faces, self.n_vertices)

    @cached_property
    def diameter(self) -> float:
        """Bounding-box diagonal of the mean shape, in model units."""
        return float(np.linalg.norm(np.ptp(self.mean_shape, axis=1)))

    def component_fields(self) -> np.ndarray:
        """Components as a ``(K, 3, V)`` array view."""
        return self.components.reshape(self.n_components, 3, self.n_vertices)


def _as_index_array(value, name: str, count: int | None) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim != 1 or (count is not None and arr.shape[0] != count):
        raise ModelFormatError(name, f"expected {count} indices, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ModelFormatError(name, "indices must be integers")
    return arr.astype(np.int64)


def make_model(mean_shape, components, reg_weights, faces, op_indices, lm68_indices,
               canthus_indices, name: str = "model") -> MorphableModel:
    """Build a model from array-likes, coercing dtypes and validating invariants."""
    mean_shape = np.array(mean_shape, dtype=np.float64)
    if mean_shape.ndim != 2 or mean_shape.shape[0] != 3:
        raise ModelFormatError("mean_shape", f"expected shape (3, V), got {mean_shape.shape}")
    n_vert = mean_shape.shape[1]
    components = np.array(components, dtype=np.float64)
    if components.ndim == 1 and components.size == 0:
        components = components.reshape(0, 3 * n_vert)
    if components.ndim == 3:
        components = components.reshape(components.shape[0], -1)
    faces = np.asarray(faces)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ModelFormatError("faces", f"expected shape (T, 3), got {faces.shape}")
    return MorphableModel(
        mean_shape=mean_shape,
        components=components,
        reg_weights=np.array(reg_weights, dtype=np.float64).reshape(-1),
        faces=faces.astype(np.int64),
        op_indices=_as_index_array(op_indices, "op_indices", N_OP),
        lm68_indices=_as_index_array(lm68_indices, "lm68_indices", N_LM68),
        canthus_indices=_as_index_array(canthus_indices, "canthus_indices", N_CANTHI),
        name=name,
    )


def validate(model: MorphableModel) -> None:
    """Check every container invariant; raise :class:`ModelFormatError` naming the field."""
    m = model.mean_shape
    if m.ndim != 2 or m.shape[0] != 3 or m.shape[1] < 1:
        raise ModelFormatError("mean_shape", f"expected shape (3, V), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ModelFormatError("mean_shape", "non-finite coordinates")
    n_vert = m.shape[1]
    c = model.components
    if c.ndim != 2 or c.shape[1] != 3 * n_vert:
        raise ModelFormatError("components", f"expected shape (K, {3 * n_vert}), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ModelFormatError("components", "non-finite values")
    mu = model.reg_weights
    if mu.shape != (c.shape[0],):
        raise ModelFormatError("reg_weights", f"expected {c.shape[0]} weights, got {mu.shape}")
    if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
        raise ModelFormatError("reg_weights", "weights must be finite and strictly positive")
    f = model.faces
    if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
        raise ModelFormatError("faces", f"expected shape (T, 3), got {f.shape}")
    if f.min() < 0 or f.max() >= n_vert:
        raise ModelFormatError("faces", f"vertex index out of range [0, {n_vert})")
    if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise ModelFormatError("faces", "degenerate face with repeated vertex")
    for name in ("op_indices", "lm68_indices", "canthus_indices"):
        idx = getattr(model, name)
        if idx.size and (idx.min() < 0 or idx.max() >= n_vert):
            raise ModelFormatError(name, f"vertex index out of range [0, {n_vert})")
    if _component_count(f, n_vert) != 1:
        raise ModelFormatError("faces", "mesh is not a single connected component")


def build_adjacency(faces: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.concatenate([edges, edges[:, ::-1]])
    edges = np.unique(edges, axis=0)
    split = np.searchsorted(edges[:, 0], np.arange(n_vertices + 1))
    return [edges[split[v]:split[v + 1], 1] for v in range(n_vertices)]


def _component_count(faces: np.ndarray, n_vertices: int) -> int:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_vertices, n_vertices))
    n, _ = connected_components(graph, directed=False)
    return n


def k_ring(model: MorphableModel, seed: int, k: int) -> np.ndarray:
    """Vertices within graph distance ``k`` of ``seed`` (inclusive), sorted."""
    if not 0 <= seed < model.n_vertices:
        raise IndexError(f"seed vertex {seed} out of range [0, {model.n_vertices})")
    if k < 0:
        raise ValueError("k must be non-negative")
    adjacency = model.adjacency
    dist = {int(seed): 0}
    queue = deque([int(seed)])
    while queue:
        v = queue.popleft()
        if dist[v] == k:
            continue
        for u in adjacency[v]:
            u = int(u)
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return np.array(sorted(dist), dtype=np.int64)


# --------------------------------------------------------------------------
# File formats


def save_model(model: MorphableModel, path) -> None:
    """Write ``model`` as binary container, or JSON when the suffix is ``.json``."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(_to_json_dict(model)))
        return
    n_vert, n_comp, n_tri = model.n_vertices, model.n_components, model.faces.shape[0]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, n_vert, n_comp, n_tri))
        fh.write(model.mean_shape.astype("<f8").tobytes())
        fh.write(model.components.astype("<f8").tobytes())
        fh.write(model.reg_weights.astype("<f8").tobytes())
        for arr in (model.faces, model.op_indices, model.lm68_indices, model.canthus_indices):
            fh.write(arr.astype("<u4").tobytes())


def load_model(path) -> MorphableModel:
    """Load a model from the binary ``C3DM`` container or its JSON variant."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        return _parse_binary(raw, name=path.stem)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError("header", f"not a C3DM container or JSON model ({exc})") from None
    return model_from_dict(doc, name=path.stem)


def _parse_binary(raw: bytes, name: str) -> MorphableModel:
    if len(raw) < 20:
        raise ModelFormatError("header", "truncated header")
    version, n_vert, n_comp, n_tri = struct.unpack("<4I", raw[4:20])
    if version != FORMAT_VERSION:
        raise ModelFormatError("header", f"unsupported version {version}")
    layout = [
        ("mean_shape", "<f8", 3 * n_vert),
        ("components", "<f8", n_comp * 3 * n_vert),
        ("reg_weights", "<f8", n_comp),
        ("faces", "<u4", 3 * n_tri),
        ("op_indices", "<u4", N_OP),
        ("lm68_indices", "<u4", N_LM68),
        ("canthus_indices", "<u4", N_CANTHI),
    ]
    expected = 20 + sum(np.dtype(dt).itemsize * n for _, dt, n in layout)
    if len(raw) != expected:
        raise ModelFormatError("header", f"size mismatch: header implies {expected} bytes, file has {len(raw)}")
    arrays = {}
    offset = 20
    for key, dt, n in layout:
        arrays[key] = np.frombuffer(raw, dtype=dt, count=n, offset=offset).copy()
        offset += np.dtype(dt).itemsize * n
    return make_model(
        arrays["mean_shape"].reshape(3, n_vert),
        arrays["components"].reshape(n_comp, 3 * n_vert),
        arrays["reg_weights"],
        arrays["faces"].reshape(n_tri, 3),
        arrays["op_indices"], arrays["lm68_indices"], arrays["canthus_indices"],
        name=name,
    )


def _to_json_dict(model: MorphableModel) -> dict:
    return {
        "format": "C3DM-json",
        "version": FORMAT_VERSION,
        "mean_shape": model.mean_shape.tolist(),
        "components": model.components.tolist(),
        "reg_weights": model.reg_weights.tolist(),
        "faces": model.faces.tolist(),
        "op_indices": model.op_indices.tolist(),
        "lm68_indices": model.lm68_indices.tolist(),
        "canthus_indices": model.canthus_indices.tolist(),
    }


def model_from_dict(doc: dict, name: str = "model") -> MorphableModel:
    keys = ("mean_shape", "components", "reg_weights", "faces",
            "op_indices", "lm68_indices", "canthus_indices")
    for key in keys:
        if key not in doc:
            raise ModelFormatError(key, "missing field")
    mean_shape = np.asarray(doc["mean_shape"], dtype=np.float64)
    if mean_shape.ndim == 1:
        if mean_shape.size % 3:
            raise ModelFormatError("mean_shape", "length is not a multiple of 3")
        mean_shape = mean_shape.reshape(3, -1)
    n_vert = mean_shape.shape[-1]
    components = np.asarray(doc["components"], dtype=np.float64)
    if components.size == 0:
        components = components.reshape(0, 3 * n_vert)
    if components.ndim != 2 or components.shape[1] != 3 * n_vert:
        raise ModelFormatError("components", f"dimension mismatch with mean_shape (3 x {n_vert})")
    return make_model(mean_shape, components, doc["reg_weights"], doc["faces"],
                      doc["op_indices"], doc["lm68_indices"], doc["canthus_indices"], name=name)
