"""Marching-tetrahedra extraction with provenance mappings.

Every mesh vertex records the grid edge it was interpolated on, and every
face records the tetrahedron it was emitted from. Face orientation points
from negative SDF toward positive SDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import TetGrid

ZERO_SDF_NUDGE = 1e-8  # relative to cell_size, applied to exact-zero vertices


@dataclass(frozen=True)
class SignChangeEdge:
    a: int
    b: int

    def __post_init__(self):
        if self.a >= self.b:
            raise ValueError("sign-change edge must be canonical (a < b)")


@dataclass
class ExtractedMesh:
    verts: np.ndarray         # (M, 3) float64
    source_edges: np.ndarray  # (M, 2) int64, canonical grid-vertex pairs
    faces: np.ndarray         # (F, 3) int64 into verts
    parent_tets: np.ndarray   # (F,) int64 into grid tets
    areas: np.ndarray         # (F,) float64
    normals: np.ndarray       # (F, 3) float64, unit

    @property
    def num_verts(self) -> int:
        return len(self.verts)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def vertex_source_edge(self, vi: int) -> SignChangeEdge:
        if not 0 <= vi < self.num_verts:
            raise IndexError(f"vertex index {vi} out of range")
        a, b = self.source_edges[vi]
        return SignChangeEdge(int(a), int(b))

    def face_parent_tet(self, fi: int) -> int:
        if not 0 <= fi < self.num_faces:
            raise IndexError(f"face index {fi} out of range")
        return int(self.parent_tets[fi])

    def face_centroids(self) -> np.ndarray:
        return self.verts[self.faces].mean(axis=1)

    def copy(self) -> "ExtractedMesh":
        return ExtractedMesh(
            self.verts.copy(), self.source_edges.copy(), self.faces.copy(),
            self.parent_tets.copy(), self.areas.copy(), self.normals.copy())


def effective_sdf(grid: TetGrid) -> np.ndarray:
    """SDF with exact zeros nudged positive so every crossing is strict."""
    sdf = grid.sdf.copy()
    sdf[sdf == 0.0] = ZERO_SDF_NUDGE * grid.cell_size
    return sdf


def surface_topology(tets: np.ndarray, sdf: np.ndarray):
    """Connectivity part of marching tetrahedra.

    Returns ``(edges, faces, parent_tets)`` where ``edges`` is the (M, 2)
    canonical sign-change edge per deduplicated mesh vertex, ``faces`` indexes
    into those vertices, and faces are oriented so that the first listed
    corner ring matches the negative-to-positive convention only up to a
    later geometric flip (see :func:`extract`).
    """
    pos = sdf > 0.0  # (V,) bool; strict crossings guaranteed by the nudge
    tet_pos = pos[tets]  # (T, 4)
    npos = tet_pos.sum(axis=1)

    raw_edges = []   # grid-vertex pairs, one per emitted face corner
    raw_parent = []  # tet index per face

    # 1-vs-3 split: one triangle on the three edges incident to the lone vertex.
    for lone in range(4):
        others = [o for o in range(4) if o != lone]
        lone_neg = (npos == 3) & ~tet_pos[:, lone]
        lone_pos = (npos == 1) & tet_pos[:, lone]
        for mask in (lone_neg, lone_pos):
            idx = np.flatnonzero(mask)
            if len(idx) == 0:
                continue
            t = tets[idx]
            tri = np.stack([
                np.stack([t[:, lone], t[:, others[0]]], axis=1),
                np.stack([t[:, lone], t[:, others[1]]], axis=1),
                np.stack([t[:, lone], t[:, others[2]]], axis=1),
            ], axis=1)  # (n, 3, 2)
            raw_edges.append(tri)
            raw_parent.append(idx)

    # 2-vs-2 split: quad on the four crossing edges, split along one diagonal.
    for pair in ((0, 1), (0, 2), (0, 3)):
        comp = tuple(o for o in range(4) if o not in pair)
        i, j = pair
        k, l = comp
        mask = (npos == 2) & (tet_pos[:, i] == tet_pos[:, j]) & (tet_pos[:, i] != tet_pos[:, k])
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            continue
        t = tets[idx]
        # Quad cycle (i,k)-(i,l)-(j,l)-(j,k); diagonal q0-q2.
        q = [
            np.stack([t[:, i], t[:, k]], axis=1),
            np.stack([t[:, i], t[:, l]], axis=1),
            np.stack([t[:, j], t[:, l]], axis=1),
            np.stack([t[:, j], t[:, k]], axis=1),
        ]
        tri1 = np.stack([q[0], q[1], q[2]], axis=1)
        tri2 = np.stack([q[0], q[2], q[3]], axis=1)
        raw_edges.append(tri1)
        raw_parent.append(idx)
        raw_edges.append(tri2)
        raw_parent.append(idx)

    if not raw_edges:
        empty_edges = np.zeros((0, 2), dtype=np.int64)
        return empty_edges, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)

    corner_edges = np.concatenate(raw_edges, axis=0)  # (F, 3, 2)
    parent = np.concatenate(raw_parent, axis=0)

    # Canonicalize and deduplicate: one mesh vertex per sign-change edge.
    flat = np.sort(corner_edges.reshape(-1, 2), axis=1)
    unique_edges, inverse = np.unique(flat, axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3).astype(np.int64)

    # Deterministic face order: sort by parent tet, then corner indices.
    order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0], parent))
    return unique_edges.astype(np.int64), faces[order], parent[order].astype(np.int64)


def interpolate_vertices(grid_vertices: np.ndarray, sdf: np.ndarray,
                         edges: np.ndarray) -> np.ndarray:
    """Zero-crossing positions on sign-change edges by linear interpolation."""
    va = grid_vertices[edges[:, 0]]
    vb = grid_vertices[edges[:, 1]]
    sa = sdf[edges[:, 0]][:, None]
    sb = sdf[edges[:, 1]][:, None]
    return (va * sb - vb * sa) / (sb - sa)


def extract(grid: TetGrid) -> ExtractedMesh:
    """Extract the SDF zero level set with source-edge and parent-tet records."""
    grid.validate()
    sdf = effective_sdf(grid)
    edges, faces, parent = surface_topology(grid.tets, sdf)
    verts = interpolate_vertices(grid.vertices, sdf, edges)

    if len(faces):
        v0 = verts[faces[:, 0]]
        e1 = verts[faces[:, 1]] - v0
        e2 = verts[faces[:, 2]] - v0
        cross = np.cross(e1, e2)
        # Orient each face from the negative region toward the positive one.
        tet_verts = grid.vertices[grid.tets[parent]]  # (F, 4, 3)
        tet_sdf = sdf[grid.tets[parent]]              # (F, 4)
        neg_w = (tet_sdf < 0).astype(np.float64)
        pos_w = 1.0 - neg_w
        neg_c = (tet_verts * neg_w[..., None]).sum(axis=1) / neg_w.sum(axis=1)[:, None]
        pos_c = (tet_verts * pos_w[..., None]).sum(axis=1) / pos_w.sum(axis=1)[:, None]
        flip = np.einsum("ij,ij->i", cross, pos_c - neg_c) < 0
        faces = faces.copy()
        faces[flip, 1], faces[flip, 2] = faces[flip, 2].copy(), faces[flip, 1].copy()
        cross[flip] *= -1.0
        norms = np.linalg.norm(cross, axis=1)
        areas = 0.5 * norms
        normals = np.divide(cross, norms[:, None],
                            out=np.zeros_like(cross), where=norms[:, None] > 0)
    else:
        areas = np.zeros(0)
        normals = np.zeros((0, 3))

    return ExtractedMesh(
        verts=verts, source_edges=edges, faces=faces, parent_tets=parent,
        areas=areas, normals=normals)


def mesh_edge_face_counts(mesh: ExtractedMesh):
    """Incidence count per undirected mesh edge (2 everywhere iff watertight)."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    unique, counts = np.unique(e, axis=0, return_counts=True)
    return unique, counts


def is_watertight(mesh: ExtractedMesh) -> bool:
    _, counts = mesh_edge_face_counts(mesh)
    return bool((counts == 2).all()) and mesh.num_faces > 0


def euler_characteristic(mesh: ExtractedMesh) -> int:
    unique, _ = mesh_edge_face_counts(mesh)
    return mesh.num_verts - len(unique) + mesh.num_faces
