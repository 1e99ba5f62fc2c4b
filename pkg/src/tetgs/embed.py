"""Gaussian kernels embedded on extracted mesh triangles.

Kernels live in barycentric coordinates on a face plus a displacement along
the face normal, and carry the face's father tetrahedron index. Sets are
stored struct-of-arrays for the rasterizer; a per-kernel view is available
through :meth:`GaussianSet.kernel`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import IntegrityError
from .extract import ExtractedMesh

MODE_RESTRICTED = 0  # flat disk in the face plane, fixed opacity, rgb color
MODE_FREE = 1        # free 3D Gaussian with SH color

RESTRICTED_OPACITY = 0.95
SCALE_FACTOR = 0.8          # in-plane radius relative to sqrt(area / count)
SH_COEFFS = 16              # degree 3
SH_C0 = 0.28209479177387814

# Barycentric layouts: 3 kernels spread toward the corners, 1 at the centroid.
THREE_KERNEL_WEIGHTS = np.array([
    [2 / 3, 1 / 6, 1 / 6],
    [1 / 6, 2 / 3, 1 / 6],
    [1 / 6, 1 / 6, 2 / 3],
])
ONE_KERNEL_WEIGHTS = np.array([[1 / 3, 1 / 3, 1 / 3]])


@dataclass
class GaussianKernel:
    face: int
    w: np.ndarray         # (3,) barycentric weights
    tau: float
    scale: np.ndarray     # (3,) world units
    rotation: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    color: np.ndarray     # (3,) rgb in restricted mode, (16, 3) SH in free mode
    opacity: float
    parent_tet: int
    mode: int


@dataclass
class GaussianSet:
    mesh: ExtractedMesh
    face: np.ndarray        # (N,) int64
    bary: np.ndarray        # (N, 3) float64
    tau: np.ndarray         # (N,) float64
    scale: np.ndarray       # (N, 3) float64
    rotation: np.ndarray    # (N, 4) float64
    rgb: np.ndarray         # (N, 3) float64, used in restricted mode
    opacity: np.ndarray     # (N,) float64
    parent_tet: np.ndarray  # (N,) int64
    mode: np.ndarray        # (N,) uint8
    sh: np.ndarray | None = dc_field(default=None)  # (N, 16, 3), free mode only

    def __len__(self) -> int:
        return len(self.face)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            mesh=self.mesh, face=self.face.copy(), bary=self.bary.copy(),
            tau=self.tau.copy(), scale=self.scale.copy(),
            rotation=self.rotation.copy(), rgb=self.rgb.copy(),
            opacity=self.opacity.copy(), parent_tet=self.parent_tet.copy(),
            mode=self.mode.copy(),
            sh=None if self.sh is None else self.sh.copy())

    def kernel(self, i: int) -> GaussianKernel:
        if self.mode[i] == MODE_FREE and self.sh is not None:
            color = self.sh[i]
        else:
            color = self.rgb[i]
        return GaussianKernel(
            face=int(self.face[i]), w=self.bary[i], tau=float(self.tau[i]),
            scale=self.scale[i], rotation=self.rotation[i], color=color,
            opacity=float(self.opacity[i]), parent_tet=int(self.parent_tet[i]),
            mode=int(self.mode[i]))

    def attribute_tuples(self):
        """Hashable per-kernel attribute tuples (for keep-preservation audits)."""
        out = []
        for i in range(len(self)):
            sh = () if self.sh is None else tuple(self.sh[i].ravel().tolist())
            out.append((
                tuple(self.bary[i]), float(self.tau[i]), tuple(self.scale[i]),
                tuple(self.rotation[i]), tuple(self.rgb[i]),
                float(self.opacity[i]), int(self.mode[i]), sh))
        return out


def _face_tangent_frames(mesh: ExtractedMesh, faces: np.ndarray) -> np.ndarray:
    """(K, 3, 3) rotation matrices with columns (t1, t2, n) per face."""
    v = mesh.verts[mesh.faces[faces]]
    t1 = v[:, 1] - v[:, 0]
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    n = mesh.normals[faces]
    t2 = np.cross(n, t1)
    t2 /= np.linalg.norm(t2, axis=1, keepdims=True)
    return np.stack([t1, t2, n], axis=-1)


def quaternion_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) for a batch of rotation matrices."""
    R = np.atleast_3d(R).reshape(-1, 3, 3)
    n = len(R)
    q = np.zeros((n, 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]

    m0 = tr > 0
    s = np.sqrt(np.where(m0, tr + 1.0, 1.0)) * 2.0
    q[m0, 0] = 0.25 * s[m0]
    q[m0, 1] = (R[m0, 2, 1] - R[m0, 1, 2]) / s[m0]
    q[m0, 2] = (R[m0, 0, 2] - R[m0, 2, 0]) / s[m0]
    q[m0, 3] = (R[m0, 1, 0] - R[m0, 0, 1]) / s[m0]

    for axis in range(3):
        j, k = (axis + 1) % 3, (axis + 2) % 3
        m = (~m0) & (R[:, axis, axis] >= R[:, j, j]) & (R[:, axis, axis] >= R[:, k, k])
        if not m.any():
            continue
        s = np.sqrt(1.0 + R[m, axis, axis] - R[m, j, j] - R[m, k, k]) * 2.0
        q[m, 0] = (R[m, k, j] - R[m, j, k]) / s
        q[m, 1 + axis] = 0.25 * s
        q[m, 1 + j] = (R[m, j, axis] + R[m, axis, j]) / s
        q[m, 1 + k] = (R[m, k, axis] + R[m, axis, k]) / s
        m0 = m0 | m

    q /= np.linalg.norm(q, axis=1, keepdims=True)
    flip = q[:, 0] < 0
    q[flip] *= -1.0
    return q


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def face_kernel_counts(areas: np.ndarray) -> np.ndarray:
    """Area policy: strictly above-mean faces get 3 kernels, others 1."""
    mean = areas.mean()
    return np.where(areas > mean, 3, 1).astype(np.int64)


def allocate(mesh: ExtractedMesh, default_rgb=(0.5, 0.5, 0.5),
             faces_subset: np.ndarray | None = None) -> GaussianSet:
    """Allocate restricted-disk kernels on mesh faces (face-major order).

    The per-face count policy is always evaluated against the whole mesh's
    mean area; ``faces_subset`` restricts which faces receive kernels.
    """
    if mesh.num_faces == 0:
        raise ValueError("cannot allocate kernels on an empty mesh")
    counts = face_kernel_counts(mesh.areas)
    if faces_subset is None:
        faces = np.arange(mesh.num_faces, dtype=np.int64)
    else:
        faces = np.asarray(sorted(set(int(f) for f in faces_subset)), dtype=np.int64)

    face_col = np.repeat(faces, counts[faces])
    n = len(face_col)
    bary = np.empty((n, 3))
    pos = 0
    for f in faces:
        c = counts[f]
        layout = THREE_KERNEL_WEIGHTS if c == 3 else ONE_KERNEL_WEIGHTS
        bary[pos:pos + c] = layout
        pos += c

    radius = SCALE_FACTOR * np.sqrt(mesh.areas[face_col] / counts[face_col])
    scale = np.zeros((n, 3))
    scale[:, 0] = radius
    scale[:, 1] = radius

    frames = _face_tangent_frames(mesh, face_col)
    rotation = quaternion_from_matrix(frames)

    return GaussianSet(
        mesh=mesh,
        face=face_col,
        bary=bary,
        tau=np.zeros(n),
        scale=scale,
        rotation=rotation,
        rgb=np.tile(np.asarray(default_rgb, dtype=np.float64), (n, 1)),
        opacity=np.full(n, RESTRICTED_OPACITY),
        parent_tet=mesh.parent_tets[face_col].copy(),
        mode=np.full(n, MODE_RESTRICTED, dtype=np.uint8),
    )


def positions(gaussians: GaussianSet, mesh: ExtractedMesh | None = None) -> np.ndarray:
    """World position of every kernel: barycentric point plus tau along the normal."""
    mesh = gaussians.mesh if mesh is None else mesh
    tri = mesh.verts[mesh.faces[gaussians.face]]  # (N, 3, 3)
    base = np.einsum("nk,nkd->nd", gaussians.bary, tri)
    return base + gaussians.tau[:, None] * mesh.normals[gaussians.face]


def position(kernel: GaussianKernel, mesh: ExtractedMesh) -> np.ndarray:
    tri = mesh.verts[mesh.faces[kernel.face]]
    return kernel.w @ tri + kernel.tau * mesh.normals[kernel.face]


def _face_edge_keys(mesh: ExtractedMesh):
    """Frozenset of the three source edges per face; unique face identity."""
    se = mesh.source_edges
    keys = []
    for f in mesh.faces:
        keys.append(frozenset(
            (int(se[v, 0]), int(se[v, 1])) for v in f))
    return keys


def reallocate(keep: GaussianSet, new_mesh: ExtractedMesh,
               edit_faces) -> GaussianSet:
    """Copy keep kernels verbatim onto the new mesh and re-seed edit faces.

    Keep kernels are matched to new faces by their source-edge triple; a keep
    face whose geometry changed raises :class:`IntegrityError` since the
    freezing stage should have made that impossible.
    """
    edit_faces = set(int(f) for f in edit_faces)
    new_keys = _face_edge_keys(new_mesh)
    key_to_new = {k: i for i, k in enumerate(new_keys)}

    old_mesh = keep.mesh
    old_keys = _face_edge_keys(old_mesh)

    kept_faces = np.unique(keep.face)
    old_to_new = {}
    slot_perm = {}  # old corner slot -> new corner slot, per kept face
    for of in kept_faces:
        key = old_keys[of]
        nf = key_to_new.get(key)
        if nf is None:
            raise IntegrityError(f"keep face {int(of)} vanished from the new mesh")
        old_corner_edges = [tuple(old_mesh.source_edges[v]) for v in old_mesh.faces[of]]
        new_corner_edges = [tuple(new_mesh.source_edges[v]) for v in new_mesh.faces[nf]]
        perm = [new_corner_edges.index(e) for e in old_corner_edges]
        old_tri = old_mesh.verts[old_mesh.faces[of]]
        new_tri = new_mesh.verts[new_mesh.faces[nf]]
        if not np.array_equal(old_tri, new_tri[np.asarray(perm)]):
            raise IntegrityError(f"keep face {int(of)} geometry changed")
        old_to_new[int(of)] = nf
        slot_perm[int(of)] = perm

    kept = keep.copy()
    kept.mesh = new_mesh
    if len(kept):
        new_face = np.asarray([old_to_new[int(f)] for f in keep.face], dtype=np.int64)
        new_bary = kept.bary.copy()
        for i, of in enumerate(keep.face):
            perm = slot_perm[int(of)]
            if perm != [0, 1, 2]:
                reordered = np.empty(3)
                for old_slot, new_slot in enumerate(perm):
                    reordered[new_slot] = keep.bary[i, old_slot]
                new_bary[i] = reordered
        kept.face = new_face
        kept.bary = new_bary
        kept.parent_tet = new_mesh.parent_tets[kept.face].copy()

    if edit_faces:
        fresh = allocate(new_mesh, faces_subset=np.asarray(sorted(edit_faces)))
    else:
        return kept

    sh = None
    if kept.sh is not None or fresh.sh is not None:
        blocks = []
        for part in (kept, fresh):
            blocks.append(part.sh if part.sh is not None
                          else np.zeros((len(part), SH_COEFFS, 3)))
        sh = np.concatenate(blocks, axis=0)

    return GaussianSet(
        mesh=new_mesh,
        face=np.concatenate([kept.face, fresh.face]),
        bary=np.concatenate([kept.bary, fresh.bary]),
        tau=np.concatenate([kept.tau, fresh.tau]),
        scale=np.concatenate([kept.scale, fresh.scale]),
        rotation=np.concatenate([kept.rotation, fresh.rotation]),
        rgb=np.concatenate([kept.rgb, fresh.rgb]),
        opacity=np.concatenate([kept.opacity, fresh.opacity]),
        parent_tet=np.concatenate([kept.parent_tet, fresh.parent_tet]),
        mode=np.concatenate([kept.mode, fresh.mode]),
        sh=sh,
    )
