"""Software rasterizer for Gaussian kernels.

Kernels are globally depth-sorted and composited front to back with alpha
weights ``opacity * G(pixel)``, where G is the projected 2D Gaussian
footprint with a 3-sigma cutoff and a 0.3 px minimum radius. The normal
channel alpha-composites face normals and renormalizes; the uncolored-mask
channel follows the front-most (largest-weight) kernel's face label. All
images are float64 numpy arrays in row-major (H, W[, C]) layout.

Rendering is sequential and bit-deterministic for a fixed scene.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .embed import MODE_FREE, GaussianSet, positions, quaternion_to_matrix
from .errors import StalenessError
from .extract import ExtractedMesh

CUTOFF_SIGMA = 3.0
MIN_FOOTPRINT_RADIUS = 0.3  # pixels
ALPHA_CLIP = 0.999
MASK_ALPHA_THRESHOLD = 0.5

# Real spherical harmonics constants, degrees 0..3 (16 coefficients).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (4,) unit quaternion (w, x, y, z), world -> camera
    translation: np.ndarray  # (3,) world -> camera

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @property
    def R(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation[None])[0]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.R.T + self.translation

    @classmethod
    def look_at(cls, position, target, *, fx, fy, cx, cy, width, height,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            right = np.cross(forward, (1.0, 0.0, 0.0))
            nr = np.linalg.norm(right)
        right /= nr
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=0)  # world -> camera rows
        from .embed import quaternion_from_matrix
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                   rotation=quaternion_from_matrix(R)[0],
                   translation=-R @ position)

    def config(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Camera":
        return cls(**{**cfg, "rotation": np.asarray(cfg["rotation"]),
                      "translation": np.asarray(cfg["translation"])})


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    """Pinhole projection of one point; depth <= 0 marks behind-camera."""
    cam = camera.world_to_camera(point)[0]
    z = float(cam[2])
    if z <= 0:
        return np.array([np.nan, np.nan]), z
    return np.array([camera.fx * cam[0] / z + camera.cx,
                     camera.fy * cam[1] / z + camera.cy]), z


def project_points(camera: Camera, points: np.ndarray):
    cam = camera.world_to_camera(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack([camera.fx * cam[:, 0] / z + camera.cx,
                       camera.fy * cam[:, 1] / z + camera.cy], axis=1)
    px[z <= 0] = np.nan
    return px, z


def unproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    x = (pixel[0] - camera.cx) / camera.fx * depth
    y = (pixel[1] - camera.cy) / camera.fy * depth
    return camera.R.T @ (np.array([x, y, depth]) - camera.translation)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values up to degree 3 for unit directions, (N, 16)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b = np.empty((len(dirs), 16))
    b[:, 0] = SH_C0
    b[:, 1] = -SH_C1 * y
    b[:, 2] = SH_C1 * z
    b[:, 3] = -SH_C1 * x
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b[:, 4] = SH_C2[0] * xy
    b[:, 5] = SH_C2[1] * yz
    b[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    b[:, 7] = SH_C2[3] * xz
    b[:, 8] = SH_C2[4] * (xx - yy)
    b[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    b[:, 10] = SH_C3[1] * xy * z
    b[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    b[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    b[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    b[:, 14] = SH_C3[5] * z * (xx - yy)
    b[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


@dataclass
class SceneProjection:
    """Per-kernel screen-space quantities for one camera, in depth order."""
    order: np.ndarray      # kernel indices sorted front to back (visible only)
    centers: np.ndarray    # (K, 2) pixel coordinates
    z: np.ndarray          # (K,) camera-space depth
    inv_cov: np.ndarray    # (K, 2, 2)
    radius: np.ndarray     # (K,) bbox half width in pixels
    colors: np.ndarray     # (K, 3) view-evaluated colors
    color_clip: np.ndarray  # (K, 3) bool, True where SH color was clipped
    opacity: np.ndarray    # (K,)
    normals: np.ndarray    # (K, 3) face normals
    faces: np.ndarray      # (K,)
    scene_hash: str = ""


def scene_hash(gaussians: GaussianSet, camera: Camera) -> str:
    h = hashlib.sha256()
    for arr in (gaussians.face, gaussians.bary, gaussians.tau, gaussians.scale,
                gaussians.rotation, gaussians.rgb, gaussians.opacity,
                gaussians.mode):
        h.update(np.ascontiguousarray(arr).tobytes())
    if gaussians.sh is not None:
        h.update(np.ascontiguousarray(gaussians.sh).tobytes())
    h.update(np.ascontiguousarray(gaussians.mesh.verts).tobytes())
    h.update(repr(sorted(camera.config().items())).encode())
    return h.hexdigest()


def project_scene(gaussians: GaussianSet, camera: Camera,
                  mesh: ExtractedMesh | None = None) -> SceneProjection:
    mesh = gaussians.mesh if mesh is None else mesh
    mu = positions(gaussians, mesh)
    cam = camera.world_to_camera(mu)
    z = cam[:, 2]
    visible = z > 1e-9

    # Projected 2x2 covariance: J W Sigma W^T J^T.
    Rk = quaternion_to_matrix(gaussians.rotation)
    S2 = gaussians.scale ** 2
    sigma = np.einsum("nij,nj,nkj->nik", Rk, S2, Rk)
    W = camera.R
    sigma_cam = np.einsum("ij,njk,lk->nil", W, sigma, W)
    x, y = cam[:, 0], cam[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(visible, 1.0 / z, 0.0)
    J = np.zeros((len(mu), 2, 3))
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * x * inv_z ** 2
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * y * inv_z ** 2
    cov2d = np.einsum("nij,njk,nlk->nil", J, sigma_cam, J)

    # Enforce the minimum footprint radius by lifting the smaller eigenvalue.
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_min = mid - disc
    lam_max = mid + disc
    lift = np.maximum(MIN_FOOTPRINT_RADIUS ** 2 - lam_min, 0.0)
    a = a + lift
    c = c + lift
    lam_max = lam_max + lift
    det = a * c - b * b
    det = np.where(det > 0, det, np.inf)
    inv_cov = np.empty((len(mu), 2, 2))
    inv_cov[:, 0, 0] = c / det
    inv_cov[:, 0, 1] = -b / det
    inv_cov[:, 1, 0] = -b / det
    inv_cov[:, 1, 1] = a / det
    radius = CUTOFF_SIGMA * np.sqrt(lam_max)

    px = np.stack([camera.fx * x * inv_z + camera.cx,
                   camera.fy * y * inv_z + camera.cy], axis=1)

    # Cull kernels entirely outside the image.
    inside = (visible
              & (px[:, 0] + radius >= 0) & (px[:, 0] - radius <= camera.width)
              & (px[:, 1] + radius >= 0) & (px[:, 1] - radius <= camera.height))
    idx = np.flatnonzero(inside)
    order = idx[np.argsort(z[idx], kind="stable")]

    colors = np.empty((len(order), 3))
    clip_mask = np.zeros((len(order), 3), dtype=bool)
    restricted = gaussians.mode[order] != MODE_FREE
    colors[restricted] = gaussians.rgb[order[restricted]]
    free = ~restricted
    if free.any():
        fi = order[free]
        view = mu[fi] - camera.center
        view /= np.linalg.norm(view, axis=1, keepdims=True)
        raw = 0.5 + np.einsum("nk,nkc->nc", sh_basis(view), gaussians.sh[fi])
        clip_mask[free] = (raw < 0) | (raw > 1)
        colors[free] = np.clip(raw, 0.0, 1.0)

    return SceneProjection(
        order=order,
        centers=px[order],
        z=z[order],
        inv_cov=inv_cov[order],
        radius=radius[order],
        colors=colors,
        color_clip=clip_mask,
        opacity=gaussians.opacity[order].copy(),
        normals=mesh.normals[gaussians.face[order]],
        faces=gaussians.face[order].copy(),
        scene_hash=scene_hash(gaussians, camera),
    )


def _footprint(center, inv_cov, radius, width, height):
    """Bounding box and Gaussian weights at pixel centers; None if empty."""
    x0 = max(int(np.floor(center[0] - radius)), 0)
    x1 = min(int(np.ceil(center[0] + radius)) + 1, width)
    y0 = max(int(np.floor(center[1] - radius)), 0)
    y1 = min(int(np.ceil(center[1] + radius)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    dx = np.arange(x0, x1) + 0.5 - center[0]
    dy = np.arange(y0, y1) + 0.5 - center[1]
    q = (inv_cov[0, 0] * dx[None, :] ** 2
         + 2.0 * inv_cov[0, 1] * dx[None, :] * dy[:, None]
         + inv_cov[1, 1] * dy[:, None] ** 2)
    g = np.where(q <= CUTOFF_SIGMA ** 2, np.exp(-0.5 * q), 0.0)
    return (y0, y1, x0, x1), g


@dataclass
class RenderResult:
    color: np.ndarray | None = None   # (H, W, 3)
    alpha: np.ndarray | None = None   # (H, W)
    normal: np.ndarray | None = None  # (H, W, 3)
    depth: np.ndarray | None = None   # (H, W), alpha-weighted camera z
    mask: np.ndarray | None = None    # (H, W) uint8, 1 = uncolored surface
    cache: SceneProjection | None = None


def render(gaussians: GaussianSet, mesh: ExtractedMesh | None, camera: Camera,
           channels=("color", "alpha"), labels: np.ndarray | None = None,
           background=None, return_cache: bool = False) -> RenderResult:
    """Front-to-back composite of the kernel set.

    ``labels`` is a per-face array (1 = uncolored) required for the "mask"
    channel. ``background`` is a constant color composited with alpha 0.
    """
    mesh = gaussians.mesh if mesh is None else mesh
    channels = set(channels)
    if "mask" in channels and labels is None:
        raise ValueError("mask channel requires per-face labels")
    H, W = camera.height, camera.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)

    scene = project_scene(gaussians, camera, mesh)
    T = np.ones((H, W))
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    wmax = np.zeros((H, W))
    front = np.full((H, W), -1, dtype=np.int64)

    for k in range(len(scene.order)):
        fp = _footprint(scene.centers[k], scene.inv_cov[k], scene.radius[k], W, H)
        if fp is None:
            continue
        (y0, y1, x0, x1), g = fp
        a = np.minimum(scene.opacity[k] * g, ALPHA_CLIP)
        w = T[y0:y1, x0:x1] * a
        color[y0:y1, x0:x1] += w[..., None] * scene.colors[k]
        depth[y0:y1, x0:x1] += w * scene.z[k]
        normal[y0:y1, x0:x1] += w[..., None] * scene.normals[k]
        sel = w > wmax[y0:y1, x0:x1]
        wmax[y0:y1, x0:x1][sel] = w[sel]
        front[y0:y1, x0:x1][sel] = k
        T[y0:y1, x0:x1] *= 1.0 - a

    alpha = 1.0 - T
    out = RenderResult()
    if "color" in channels:
        out.color = color + T[..., None] * bg
    if "alpha" in channels:
        out.alpha = alpha
    if "depth" in channels:
        out.depth = depth
    if "normal" in channels:
        norms = np.linalg.norm(normal, axis=2, keepdims=True)
        out.normal = np.divide(normal, norms, out=np.zeros_like(normal),
                               where=norms > 1e-12)
    if "mask" in channels:
        labels = np.asarray(labels)
        hit = (alpha > MASK_ALPHA_THRESHOLD) & (front >= 0)
        mask = np.zeros((H, W), dtype=np.uint8)
        face_of_front = np.where(front >= 0, scene.faces[np.maximum(front, 0)], 0)
        mask[hit & (labels[face_of_front] == 1)] = 1
        out.mask = mask
    if return_cache:
        out.cache = scene
    return out


@dataclass
class BackwardResult:
    grad_color: np.ndarray            # (N, 3) wrt composited color (rgb)
    grad_opacity: np.ndarray          # (N,)
    grad_sh: np.ndarray | None = None  # (N, 16, 3), free-mode kernels only


def backward_color(gaussians: GaussianSet, mesh: ExtractedMesh | None,
                   camera: Camera, loss_grad_image: np.ndarray,
                   cache: SceneProjection | None = None,
                   background=None) -> BackwardResult:
    """Analytic gradients of a scalar image loss wrt kernel color and opacity.

    ``loss_grad_image`` is dLoss/dColorImage, (H, W, 3). Geometry attributes
    are deliberately out of scope; downstream refinement perturbs them with
    finite differences over full renders.
    """
    mesh = gaussians.mesh if mesh is None else mesh
    H, W = camera.height, camera.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    if cache is not None:
        if cache.scene_hash != scene_hash(gaussians, camera):
            raise StalenessError("forward cache does not match the current scene")
        scene = cache
    else:
        scene = project_scene(gaussians, camera, mesh)
    gI = np.asarray(loss_grad_image, dtype=np.float64)

    n = len(gaussians)
    grad_color = np.zeros((n, 3))
    grad_opacity = np.zeros(n)

    footprints = []
    for k in range(len(scene.order)):
        footprints.append(_footprint(scene.centers[k], scene.inv_cov[k],
                                     scene.radius[k], W, H))

    # Forward pass for the final image (needed by the opacity derivative).
    T = np.ones((H, W))
    final = np.zeros((H, W, 3))
    for k, fp in enumerate(footprints):
        if fp is None:
            continue
        (y0, y1, x0, x1), g = fp
        a = np.minimum(scene.opacity[k] * g, ALPHA_CLIP)
        w = T[y0:y1, x0:x1] * a
        final[y0:y1, x0:x1] += w[..., None] * scene.colors[k]
        T[y0:y1, x0:x1] *= 1.0 - a
    final += T[..., None] * bg

    # Second sweep: running transmittance T and front accumulation A give
    # dI/da_k = T_k c_k - (I - A_k) / (1 - a_k) at every pixel.
    T = np.ones((H, W))
    A = np.zeros((H, W, 3))
    for k, fp in enumerate(footprints):
        if fp is None:
            continue
        (y0, y1, x0, x1), g = fp
        ki = scene.order[k]
        a = np.minimum(scene.opacity[k] * g, ALPHA_CLIP)
        unclipped = scene.opacity[k] * g < ALPHA_CLIP
        Tb = T[y0:y1, x0:x1]
        w = Tb * a
        A[y0:y1, x0:x1] += w[..., None] * scene.colors[k]

        gI_box = gI[y0:y1, x0:x1]
        grad_color[ki] = np.einsum("yxc,yx->c", gI_box, w)

        rest = (final[y0:y1, x0:x1] - A[y0:y1, x0:x1]) / (1.0 - a)[..., None]
        dI_da = Tb[..., None] * scene.colors[k] - rest
        grad_a = np.einsum("yxc,yxc->yx", gI_box, dI_da) * unclipped
        grad_opacity[ki] = float((grad_a * g).sum())

        T[y0:y1, x0:x1] = Tb * (1.0 - a)

    grad_sh = None
    if gaussians.sh is not None and (gaussians.mode == MODE_FREE).any():
        grad_sh = np.zeros((n, 16, 3))
        mu = positions(gaussians, mesh)
        view = mu - camera.center
        view /= np.linalg.norm(view, axis=1, keepdims=True)
        basis = sh_basis(view)
        order_pos = {int(ki): k for k, ki in enumerate(scene.order)}
        for ki in np.flatnonzero(gaussians.mode == MODE_FREE):
            k = order_pos.get(int(ki))
            if k is None:
                continue
            gc = grad_color[ki] * ~scene.color_clip[k]
            grad_sh[ki] = basis[ki][:, None] * gc[None, :]

    return BackwardResult(grad_color=grad_color, grad_opacity=grad_opacity,
                          grad_sh=grad_sh)


def color_weight_matrix(gaussians: GaussianSet, camera: Camera,
                        mesh: ExtractedMesh | None = None) -> sparse.csr_matrix:
    """Sparse (H*W, N) matrix of compositing weights.

    Valid while geometry and opacity are fixed; the color image is then
    ``(Wmat @ colors).reshape(H, W, 3)``, which makes color-only optimization
    a sparse linear problem.
    """
    mesh = gaussians.mesh if mesh is None else mesh
    H, W = camera.height, camera.width
    scene = project_scene(gaussians, camera, mesh)
    T = np.ones((H, W))
    rows, cols, vals = [], [], []
    pixel_ids = np.arange(H * W).reshape(H, W)
    for k in range(len(scene.order)):
        fp = _footprint(scene.centers[k], scene.inv_cov[k], scene.radius[k], W, H)
        if fp is None:
            continue
        (y0, y1, x0, x1), g = fp
        a = np.minimum(scene.opacity[k] * g, ALPHA_CLIP)
        w = T[y0:y1, x0:x1] * a
        nz = w > 0
        rows.append(pixel_ids[y0:y1, x0:x1][nz])
        cols.append(np.full(int(nz.sum()), scene.order[k]))
        vals.append(w[nz])
        T[y0:y1, x0:x1] *= 1.0 - a
    if not rows:
        return sparse.csr_matrix((H * W, len(gaussians)))
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(H * W, len(gaussians)))
    return mat.tocsr()


def rasterize_mesh_depth(mesh: ExtractedMesh, camera: Camera) -> np.ndarray:
    """Z-buffer of the triangle mesh; +inf where nothing is hit."""
    H, W = camera.height, camera.width
    zbuf = np.full((H, W), np.inf)
    px, z = project_points(camera, mesh.verts)
    for f in range(mesh.num_faces):
        vi = mesh.faces[f]
        if (z[vi] <= 0).any() or not np.isfinite(px[vi]).all():
            continue
        p = px[vi]
        x0 = max(int(np.floor(p[:, 0].min())), 0)
        x1 = min(int(np.ceil(p[:, 0].max())) + 1, W)
        y0 = max(int(np.floor(p[:, 1].min())), 0)
        y1 = min(int(np.ceil(p[:, 1].max())) + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        d01 = p[1] - p[0]
        d02 = p[2] - p[0]
        denom = d01[0] * d02[1] - d01[1] * d02[0]
        if abs(denom) < 1e-12:
            continue
        rx = gx - p[0, 0]
        ry = gy - p[0, 1]
        b1 = (rx * d02[1] - ry * d02[0]) / denom
        b2 = (ry * d01[0] - rx * d01[1]) / denom
        b0 = 1.0 - b1 - b2
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        zf = b0 * z[vi[0]] + b1 * z[vi[1]] + b2 * z[vi[2]]
        patch = zbuf[y0:y1, x0:x1]
        upd = inside & (zf < patch)
        patch[upd] = zf[upd]
    return zbuf


def visible_faces(mesh: ExtractedMesh, camera: Camera, depth_tol: float,
                  zbuf: np.ndarray | None = None):
    """Face-centroid visibility with a z-buffer depth test.

    Returns ``(visible, pixel)`` where pixel holds integer image coordinates
    (x, y) for visible faces and -1 elsewhere.
    """
    if zbuf is None:
        zbuf = rasterize_mesh_depth(mesh, camera)
    H, W = camera.height, camera.width
    px, z = project_points(camera, mesh.face_centroids())
    ix = np.floor(px[:, 0]).astype(np.int64)
    iy = np.floor(px[:, 1]).astype(np.int64)
    in_image = ((z > 0) & np.isfinite(px).all(axis=1)
                & (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H))
    visible = np.zeros(mesh.num_faces, dtype=bool)
    idx = np.flatnonzero(in_image)
    visible[idx] = np.abs(z[idx] - zbuf[iy[idx], ix[idx]]) <= depth_tol
    pixel = np.full((mesh.num_faces, 2), -1, dtype=np.int64)
    pixel[visible, 0] = ix[visible]
    pixel[visible, 1] = iy[visible]
    return visible, pixel
