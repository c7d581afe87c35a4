"""Uniform grids and the discrete calculus shared by the solver stages.

A ScalarGrid is a box of float64 node values with one spacing for all three
axes; coordinates are derived from the origin, never stored.  The helpers
here are the plumbing everything else leans on: ball masks, the seven-point
Laplacian, node-wise second differences, and the ball average of the
discrete Hessian that turns a grid function into a quadratic form.

Grids persist as a raw little-endian float64 block next to a JSON sidecar
carrying origin, spacing, dims and byte order.  Writes go through a
temporary file and os.replace, so an interrupted run never leaves a
half-written grid behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "ScalarGrid",
    "TooCoarse",
    "ball_mask",
    "exterior_layer",
    "laplacian7",
    "hessian_components",
    "mean_hessian",
    "save_grid",
    "load_grid",
]


class TooCoarse(ValueError):
    """The grid cannot resolve the requested ball or stencil."""


@dataclass(frozen=True)
class ScalarGrid:
    """Node values on a uniform box grid.

    ``origin`` is the coordinate of node (0, 0, 0); node (i, j, k) sits at
    origin + spacing * (i, j, k).  ``values`` has one entry per node.
    Solvers guarantee finite values on success; the container itself stays
    permissive so partial or diagnostic data can be carried around.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3).copy()
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", float(self.spacing))
        if not self.spacing > 0.0:
            raise ValueError("spacing must be positive")
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError("values must be 3-d with at least 2 nodes per axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing * np.arange(self.dims[i])

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.axis(0), self.axis(1), self.axis(2)

    def copy(self) -> ScalarGrid:
        return ScalarGrid(self.origin, self.spacing, self.values.copy())

    @staticmethod
    def sample(fn, origin, spacing: float, dims) -> ScalarGrid:
        """Fill a grid by evaluating ``fn`` on (N, 3) batches of nodes.

        Evaluation runs one x-slab at a time to keep the point buffers
        small even on 129^3 grids.
        """
        if np.ndim(dims) == 0:
            dims = (int(dims),) * 3
        nx, ny, nz = (int(d) for d in dims)
        origin = np.asarray(origin, dtype=float).reshape(3)
        y = origin[1] + spacing * np.arange(ny)
        z = origin[2] + spacing * np.arange(nz)
        yy, zz = np.meshgrid(y, z, indexing="ij")
        pts = np.empty((ny * nz, 3))
        pts[:, 1] = yy.ravel()
        pts[:, 2] = zz.ravel()
        vals = np.empty((nx, ny, nz))
        for i in range(nx):
            pts[:, 0] = origin[0] + spacing * i
            vals[i] = np.asarray(fn(pts), dtype=float).reshape(ny, nz)
        return ScalarGrid(origin, spacing, vals)


def ball_mask(grid: ScalarGrid, radius: float, center=None,
              strict: bool = True) -> np.ndarray:
    """Boolean mask of nodes inside the ball around ``center`` (default 0)."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    c = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    x, y, z = grid.axes()
    d2 = ((x - c[0]) ** 2)[:, None, None] \
        + ((y - c[1]) ** 2)[None, :, None] \
        + ((z - c[2]) ** 2)[None, None, :]
    return d2 < radius ** 2 if strict else d2 <= radius ** 2


_STRUCT6 = ndimage.generate_binary_structure(3, 1)


def exterior_layer(mask: np.ndarray) -> np.ndarray:
    """Nodes outside ``mask`` with a 6-neighbor inside it.

    This is where Dirichlet data lives for ball-in-box domains: the
    seven-point stencil at an active node never reaches past this layer.
    """
    return ndimage.binary_dilation(mask, structure=_STRUCT6) & ~mask


def laplacian7(grid: ScalarGrid) -> np.ndarray:
    """Seven-point discrete Laplacian at interior nodes (shape dims - 2)."""
    v = grid.values
    h2 = grid.spacing ** 2
    return (v[:-2, 1:-1, 1:-1] + v[2:, 1:-1, 1:-1]
            + v[1:-1, :-2, 1:-1] + v[1:-1, 2:, 1:-1]
            + v[1:-1, 1:-1, :-2] + v[1:-1, 1:-1, 2:]
            - 6.0 * v[1:-1, 1:-1, 1:-1]) / h2


def hessian_components(grid: ScalarGrid):
    """Central second differences at interior nodes.

    Returns (xx, yy, zz, xy, xz, yz), each of shape dims - 2.  The stencil
    is exact on cubic polynomials.
    """
    v = grid.values
    h2 = grid.spacing ** 2
    c = v[1:-1, 1:-1, 1:-1]
    xx = (v[2:, 1:-1, 1:-1] - 2.0 * c + v[:-2, 1:-1, 1:-1]) / h2
    yy = (v[1:-1, 2:, 1:-1] - 2.0 * c + v[1:-1, :-2, 1:-1]) / h2
    zz = (v[1:-1, 1:-1, 2:] - 2.0 * c + v[1:-1, 1:-1, :-2]) / h2
    xy = (v[2:, 2:, 1:-1] - v[2:, :-2, 1:-1]
          - v[:-2, 2:, 1:-1] + v[:-2, :-2, 1:-1]) / (4.0 * h2)
    xz = (v[2:, 1:-1, 2:] - v[2:, 1:-1, :-2]
          - v[:-2, 1:-1, 2:] + v[:-2, 1:-1, :-2]) / (4.0 * h2)
    yz = (v[1:-1, 2:, 2:] - v[1:-1, 2:, :-2]
          - v[1:-1, :-2, 2:] + v[1:-1, :-2, :-2]) / (4.0 * h2)
    return xx, yy, zz, xy, xz, yz


# Offsets touched by the second-difference stencil: the six axis neighbors
# plus the twelve in-plane diagonals used by the mixed terms.
_HESSIAN_OFFSETS = [
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    (1, 1, 0), (1, -1, 0), (-1, 1, 0), (-1, -1, 0),
    (1, 0, 1), (1, 0, -1), (-1, 0, 1), (-1, 0, -1),
    (0, 1, 1), (0, 1, -1), (0, -1, 1), (0, -1, -1),
]


def mean_hessian(grid: ScalarGrid, radius: float, center=None) -> np.ndarray:
    """Ball average of the discrete Hessian, as a symmetric 3x3 matrix.

    A node contributes only when its entire second-difference stencil lies
    in the closed ball, so values outside the ball are never read.  Raises
    TooCoarse when no node qualifies.
    """
    inside = ball_mask(grid, radius, center, strict=False)
    n0, n1, n2 = inside.shape
    ok = inside[1:-1, 1:-1, 1:-1].copy()
    for a, b, c in _HESSIAN_OFFSETS:
        ok &= inside[1 + a:n0 - 1 + a, 1 + b:n1 - 1 + b, 1 + c:n2 - 1 + c]
    if not ok.any():
        raise TooCoarse("ball holds no complete Hessian stencil at this spacing")
    xx, yy, zz, xy, xz, yz = hessian_components(grid)
    m = np.array([
        [xx[ok].mean(), xy[ok].mean(), xz[ok].mean()],
        [xy[ok].mean(), yy[ok].mean(), yz[ok].mean()],
        [xz[ok].mean(), yz[ok].mean(), zz[ok].mean()],
    ])
    return 0.5 * (m + m.T)


def _write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".grid-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_grid(grid: ScalarGrid, path, extra: dict | None = None) -> None:
    """Write the raw float64 block to ``path`` and metadata to ``path.json``.

    extra entries are merged into the sidecar; callers use this to stamp
    provenance.  Keys that would shadow the layout fields are rejected.
    """
    path = os.fspath(path)
    block = np.ascontiguousarray(grid.values, dtype="<f8").tobytes()
    meta = {
        "byte_order": "little",
        "dims": [int(d) for d in grid.dims],
        "dtype": "float64",
        "layout": "C",
        "origin": [float(v) for v in grid.origin],
        "spacing": grid.spacing,
    }
    if extra:
        overlap = set(extra) & set(meta)
        if overlap:
            raise ValueError(f"extra sidecar keys collide: {sorted(overlap)}")
        meta.update(extra)
    _write_atomic(path, block)
    _write_atomic(path + ".json",
                  (json.dumps(meta, sort_keys=True) + "\n").encode())


def load_grid(path) -> ScalarGrid:
    path = os.fspath(path)
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("dtype") != "float64" or meta.get("byte_order") != "little":
        raise ValueError(f"unsupported grid encoding in {path}.json")
    if meta.get("layout", "C") != "C":
        raise ValueError("only C-ordered grid blocks are supported")
    dims = tuple(int(d) for d in meta["dims"])
    data = np.fromfile(path, dtype="<f8")
    if data.size != int(np.prod(dims)):
        raise ValueError(
            f"grid block {path} holds {data.size} values, expected {np.prod(dims)}")
    return ScalarGrid(meta["origin"], float(meta["spacing"]),
                      data.reshape(dims).astype(float))
