"""Keep/edit partitioning from multi-view masks.

Faces are classified by back-projecting binary preservation masks: a face is
kept when, among the views where its centroid passes a depth test against the
rasterized mesh, at least an ``agreement`` fraction sees it inside the mask.
Faces no view sees stay keep (conservative). The face split is then lifted to
tetrahedra via the parent-tet mapping and to grid vertices via tet incidence,
and the keep vertices' SDF values are frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extract import ExtractedMesh
from .grid import TetGrid
from .render import Camera, rasterize_mesh_depth, visible_faces

DEFAULT_AGREEMENT = 0.5


@dataclass
class MaskView:
    camera: Camera
    mask: np.ndarray  # (H, W), nonzero = preserved region

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.shape != (self.camera.height, self.camera.width):
            raise ValueError(
                f"mask shape {self.mask.shape} does not match camera image "
                f"size {(self.camera.height, self.camera.width)}")


@dataclass
class PartitionResult:
    keep_faces: np.ndarray  # sorted int64 index arrays
    edit_faces: np.ndarray
    keep_tets: np.ndarray
    edit_tets: np.ndarray
    keep_verts: np.ndarray
    edit_verts: np.ndarray

    def to_config(self) -> dict:
        return {name: getattr(self, name).tolist() for name in (
            "keep_faces", "edit_faces", "keep_tets", "edit_tets",
            "keep_verts", "edit_verts")}

    @classmethod
    def from_config(cls, cfg: dict) -> "PartitionResult":
        return cls(**{k: np.asarray(cfg[k], dtype=np.int64) for k in (
            "keep_faces", "edit_faces", "keep_tets", "edit_tets",
            "keep_verts", "edit_verts")})


def classify_faces(mesh: ExtractedMesh, views, agreement: float = DEFAULT_AGREEMENT,
                   *, cell_size: float):
    """Split face indices into (keep_faces, edit_faces) by mask majority vote."""
    if not views:
        raise ValueError("at least one mask view is required")
    if not 0.0 < agreement <= 1.0:
        raise ValueError("agreement must be in (0, 1]")

    seen = np.zeros(mesh.num_faces, dtype=np.int64)
    preserved = np.zeros(mesh.num_faces, dtype=np.int64)
    tol = 0.5 * cell_size
    for view in views:
        zbuf = rasterize_mesh_depth(mesh, view.camera)
        vis, pixel = visible_faces(mesh, view.camera, tol, zbuf=zbuf)
        idx = np.flatnonzero(vis)
        seen[idx] += 1
        inside = view.mask[pixel[idx, 1], pixel[idx, 0]] != 0
        preserved[idx[inside]] += 1

    keep = seen == 0  # invisible faces default to keep
    visible = ~keep
    keep[visible] = preserved[visible] >= agreement * seen[visible]
    keep_faces = np.flatnonzero(keep).astype(np.int64)
    edit_faces = np.flatnonzero(~keep).astype(np.int64)
    return keep_faces, edit_faces


def partition_tets(mesh: ExtractedMesh, keep_faces, grid: TetGrid) -> PartitionResult:
    """Lift a face split to tetrahedra and tetrahedral vertices."""
    keep_faces = np.asarray(sorted(set(int(f) for f in keep_faces)), dtype=np.int64)
    if len(keep_faces) and (keep_faces[0] < 0 or keep_faces[-1] >= mesh.num_faces):
        raise IndexError("keep face index out of range")

    face_is_keep = np.zeros(mesh.num_faces, dtype=bool)
    face_is_keep[keep_faces] = True
    edit_faces = np.flatnonzero(~face_is_keep).astype(np.int64)

    tet_is_keep = np.zeros(grid.num_tets, dtype=bool)
    tet_is_keep[mesh.parent_tets[keep_faces]] = True
    keep_tets = np.flatnonzero(tet_is_keep).astype(np.int64)
    edit_tets = np.flatnonzero(~tet_is_keep).astype(np.int64)

    vert_is_keep = np.zeros(grid.num_vertices, dtype=bool)
    vert_is_keep[np.unique(grid.tets[keep_tets])] = True
    keep_verts = np.flatnonzero(vert_is_keep).astype(np.int64)
    edit_verts = np.flatnonzero(~vert_is_keep).astype(np.int64)

    return PartitionResult(
        keep_faces=keep_faces, edit_faces=edit_faces,
        keep_tets=keep_tets, edit_tets=edit_tets,
        keep_verts=keep_verts, edit_verts=edit_verts)


def freeze(grid: TetGrid, partition: PartitionResult) -> TetGrid:
    """Grid copy whose frozen flags mark exactly the keep vertices.

    The frozen vertices' current sdf values become the preservation reference
    that the adaptation stage must leave bit-identical.
    """
    if len(partition.keep_verts) and partition.keep_verts[-1] >= grid.num_vertices:
        raise IndexError("partition does not match this grid")
    out = grid.copy()
    out.frozen = np.zeros(grid.num_vertices, dtype=bool)
    out.frozen[partition.keep_verts] = True
    return out


def keep_kernel_indices(gaussians, partition: PartitionResult) -> np.ndarray:
    """Indices of kernels whose parent tetrahedron is kept."""
    tet_is_keep = np.zeros(int(max(partition.keep_tets.max(initial=-1),
                                   partition.edit_tets.max(initial=-1))) + 1,
                           dtype=bool)
    tet_is_keep[partition.keep_tets] = True
    return np.flatnonzero(tet_is_keep[gaussians.parent_tet]).astype(np.int64)
