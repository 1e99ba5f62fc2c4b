"""Tetrahedral grids with per-vertex SDF values and freeze flags.

A grid is the Kuhn (6-tetrahedra) decomposition of a cube lattice. All cubes
use the same split, so neighboring cubes share face diagonals and isosurface
extraction is crack-free. Grids are value-like: operations return new grids
and never mutate their inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .errors import FieldEvaluationError
from .fields import ScalarField

# Local vertex pairs forming the 6 edges of a tetrahedron.
TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# Local vertex triples forming the 4 faces, keyed by the opposite (apex) vertex.
TET_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


@dataclass
class TetGrid:
    vertices: np.ndarray  # (V, 3) float64, world units
    tets: np.ndarray      # (T, 4) int64, positively oriented
    sdf: np.ndarray       # (V,) float64, negative inside
    frozen: np.ndarray    # (V,) bool
    cell_size: float      # edge length of the generating cube lattice

    def copy(self) -> "TetGrid":
        return TetGrid(
            self.vertices.copy(), self.tets.copy(),
            self.sdf.copy(), self.frozen.copy(), self.cell_size,
        )

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    def validate(self) -> None:
        """Raise ValueError if any structural invariant is violated."""
        tets = self.tets
        if tets.min(initial=0) < 0 or tets.max(initial=-1) >= len(self.vertices):
            raise ValueError("tet vertex index out of range")
        sorted_tets = np.sort(tets, axis=1)
        if (np.diff(sorted_tets, axis=1) == 0).any():
            raise ValueError("tet with repeated vertex index")
        if (tet_volumes(self) <= 0).any():
            raise ValueError("tet with non-positive volume")
        if not np.isfinite(self.sdf).all():
            raise ValueError("non-finite sdf value")


def tet_volumes(grid: TetGrid) -> np.ndarray:
    """Signed volume of every tet (positive under the stored orientation)."""
    corners = grid.vertices[grid.tets]  # (T, 4, 3)
    edges = corners[:, 1:] - corners[:, :1]
    return np.linalg.det(edges) / 6.0


def build_grid(bbox, resolution: int) -> TetGrid:
    """Kuhn-decompose an axis-aligned box into 6 * resolution**3 tets.

    ``bbox`` is ((xmin, ymin, zmin), (xmax, ymax, zmax)). Every lattice cube
    is split into the six tetrahedra sharing the cube's main diagonal.
    """
    if int(resolution) != resolution or resolution < 1:
        raise ValueError(f"resolution must be a positive integer, got {resolution}")
    resolution = int(resolution)
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    if not (hi > lo).all():
        raise ValueError("degenerate bounding box")

    n = resolution
    axis_coords = [np.linspace(lo[a], hi[a], n + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axis_coords, indexing="ij")
    vertices = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    corner = {}
    for bits in itertools.product((0, 1), repeat=3):
        corner[bits] = vid(ii + bits[0], jj + bits[1], kk + bits[2])

    # One tet per monotone lattice path (0,0,0) -> (1,1,1); all six share the
    # main diagonal, so translated cubes agree on their face diagonals.
    tet_blocks = []
    for perm in itertools.permutations(range(3)):
        b1 = [0, 0, 0]
        b1[perm[0]] = 1
        b2 = list(b1)
        b2[perm[1]] = 1
        tet_blocks.append(np.stack([
            corner[(0, 0, 0)], corner[tuple(b1)], corner[tuple(b2)], corner[(1, 1, 1)],
        ], axis=1))
    tets = np.concatenate(tet_blocks, axis=0).astype(np.int64)

    grid = TetGrid(
        vertices=vertices,
        tets=tets,
        sdf=np.zeros(len(vertices)),
        frozen=np.zeros(len(vertices), dtype=bool),
        cell_size=float((hi - lo)[0] / n),
    )
    _orient_positive(grid)
    return grid


def _orient_positive(grid: TetGrid) -> None:
    flip = tet_volumes(grid) < 0
    grid.tets[flip, 2], grid.tets[flip, 3] = (
        grid.tets[flip, 3].copy(), grid.tets[flip, 2].copy())


def sample_field(grid: TetGrid, field: ScalarField) -> TetGrid:
    """Evaluate ``field`` at every grid vertex; connectivity is unchanged."""
    values = np.asarray(field(grid.vertices), dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        raise FieldEvaluationError(
            f"field produced a non-finite value at vertex {int(np.flatnonzero(bad)[0])}")
    out = grid.copy()
    out.sdf = values
    return out


def _edge_key(a: int, b: int):
    return (a, b) if a < b else (b, a)


def subdivide(grid: TetGrid, tet_subset) -> TetGrid:
    """Red-green refinement of the selected tets.

    Selected tets are split into 8 children through their edge midpoints.
    Unselected tets that acquired split edges are closed conformingly: a tet
    with exactly one fully split face gets a 1:4 apex split matching the red
    face pattern, other patterns are bisected edge by edge in a global
    canonical order (identical on both sides of a shared face), and tets
    whose pattern admits no crack-free closure are promoted to red. Midpoint
    SDF is the mean of the edge endpoints; a midpoint is frozen only if both
    endpoints are frozen.
    """
    tet_subset = np.asarray(sorted(set(int(t) for t in tet_subset)), dtype=np.int64)
    if len(tet_subset) and (tet_subset.min() < 0 or tet_subset.max() >= grid.num_tets):
        raise ValueError("tet index out of range")
    if len(tet_subset) == 0:
        return grid.copy()

    tets = grid.tets
    red = np.zeros(grid.num_tets, dtype=bool)
    red[tet_subset] = True

    tet_edge_keys = [
        [_edge_key(int(t[a]), int(t[b])) for a, b in TET_EDGES] for t in tets
    ]

    # Closure to a fixpoint: promote tets whose split pattern has a fully
    # split face plus extra split edges (no green template matches the red
    # face pattern there).
    while True:
        split = set()
        for ti in np.flatnonzero(red):
            split.update(tet_edge_keys[ti])
        promoted = False
        for ti in np.flatnonzero(~red):
            marks = [k in split for k in tet_edge_keys[ti]]
            count = sum(marks)
            if count == 0:
                continue
            full_faces = 0
            for face in TET_FACES:
                face_edges = [e for e in range(6) if
                              TET_EDGES[e][0] in face and TET_EDGES[e][1] in face]
                if all(marks[e] for e in face_edges):
                    full_faces += 1
            if full_faces > 0 and count > 3:
                red[ti] = True
                promoted = True
        if not promoted:
            break

    vertices = [grid.vertices]
    sdf = [grid.sdf]
    frozen = [grid.frozen]
    next_vid = grid.num_vertices
    midpoints: dict[tuple, int] = {}
    midpoint_pos: dict[int, np.ndarray] = {}
    vpos = grid.vertices

    def midpoint(key) -> int:
        nonlocal next_vid
        m = midpoints.get(key)
        if m is None:
            a, b = key
            pos = 0.5 * (vpos[a] + vpos[b])
            vertices.append(pos)
            sdf.append(np.array([0.5 * (grid.sdf[a] + grid.sdf[b])]))
            frozen.append(np.array([grid.frozen[a] and grid.frozen[b]]))
            m = midpoints[key] = next_vid
            midpoint_pos[m] = pos
            next_vid += 1
        return m

    def vertex_pos(idx):
        return vpos[idx] if idx < len(vpos) else midpoint_pos[idx]

    new_tets: list[list[int]] = []

    def emit_red(tet):
        a, b, c, d = (int(v) for v in tet)
        mab = midpoint(_edge_key(a, b))
        mac = midpoint(_edge_key(a, c))
        mad = midpoint(_edge_key(a, d))
        mbc = midpoint(_edge_key(b, c))
        mbd = midpoint(_edge_key(b, d))
        mcd = midpoint(_edge_key(c, d))
        new_tets.extend([
            [a, mab, mac, mad], [b, mab, mbc, mbd],
            [c, mac, mbc, mcd], [d, mad, mbd, mcd],
        ])
        # Inner octahedron split along its shortest diagonal (deterministic
        # tie-break by vertex ids). The diagonal choice never touches the
        # octahedron's boundary faces, so conformity is unaffected.
        diagonals = [
            ((mab, mcd), (mac, mad, mbd, mbc)),
            ((mac, mbd), (mab, mbc, mcd, mad)),
            ((mad, mbc), (mab, mac, mcd, mbd)),
        ]
        scored = []
        for (p, q), ring in diagonals:
            d2 = float(np.sum((vertex_pos(p) - vertex_pos(q)) ** 2))
            scored.append((round(d2, 15), (p, q), ring))
        scored.sort()
        _, (p, q), (r1, r2, r3, r4) = scored[0]
        new_tets.extend([
            [p, q, r1, r2], [p, q, r2, r3], [p, q, r3, r4], [p, q, r4, r1],
        ])

    def emit_medial(tet, face_local):
        apex = int(tet[[i for i in range(4) if i not in face_local][0]])
        fa, fb, fc = (int(tet[i]) for i in face_local)
        mab = midpoint(_edge_key(fa, fb))
        mac = midpoint(_edge_key(fa, fc))
        mbc = midpoint(_edge_key(fb, fc))
        new_tets.extend([
            [apex, fa, mab, mac], [apex, fb, mab, mbc],
            [apex, fc, mac, mbc], [apex, mab, mbc, mac],
        ])

    def emit_bisected(tet_verts, split):
        pending = [tuple(int(v) for v in tet_verts)]
        while pending:
            vs = pending.pop()
            present = sorted(
                k for k in (_edge_key(vs[a], vs[b]) for a, b in TET_EDGES) if k in split
            )
            if not present:
                new_tets.append(list(vs))
                continue
            a, b = present[0]
            m = midpoint((a, b))
            pending.append(tuple(m if v == b else v for v in vs))
            pending.append(tuple(m if v == a else v for v in vs))

    split = set()
    for ti in np.flatnonzero(red):
        split.update(tet_edge_keys[ti])

    for ti in range(grid.num_tets):
        tet = tets[ti]
        if red[ti]:
            emit_red(tet)
            continue
        marks = [k in split for k in tet_edge_keys[ti]]
        count = sum(marks)
        if count == 0:
            new_tets.append([int(v) for v in tet])
            continue
        full_face = None
        for fi, face in enumerate(TET_FACES):
            face_edges = [e for e in range(6) if
                          TET_EDGES[e][0] in face and TET_EDGES[e][1] in face]
            if all(marks[e] for e in face_edges):
                full_face = face
        if full_face is not None and count == 3:
            emit_medial(tet, full_face)
        else:
            emit_bisected(tet, split)

    out = TetGrid(
        vertices=np.concatenate([np.atleast_2d(v) for v in vertices], axis=0),
        tets=np.asarray(new_tets, dtype=np.int64),
        sdf=np.concatenate([np.atleast_1d(s) for s in sdf]),
        frozen=np.concatenate([np.atleast_1d(f) for f in frozen]),
        cell_size=grid.cell_size,
    )
    _orient_positive(out)
    return out


def boundary_vertex_mask(grid: TetGrid) -> np.ndarray:
    """Vertices on the axis-aligned bounding box of the grid."""
    lo = grid.vertices.min(axis=0)
    hi = grid.vertices.max(axis=0)
    eps = 1e-12 * max(1.0, float(np.abs(grid.vertices).max()))
    on = (np.abs(grid.vertices - lo) < eps) | (np.abs(grid.vertices - hi) < eps)
    return on.any(axis=1)
