"""Progressive view-based texture painting.

A painter (the reference implementation renders a ground-truth textured
scene) supplies supervision images view by view. Each step renders the
current kernels, blends the painted image over the uncolored region through
a blurred mask, optimizes the colors of the kernels on the back-projected
masked faces, and marks those faces as colored. Afterwards the restricted
disks are activated into free 3D Gaussians and refined against multi-view
images: color and opacity by the rasterizer's analytic gradients, tau and
scale by simultaneous-perturbation finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .embed import (MODE_FREE, MODE_RESTRICTED, SH_C0, SH_COEFFS, GaussianSet)
from .extract import ExtractedMesh
from .metrics import SSIM_SIGMA, SSIM_TRUNCATE, ssim
from .render import (Camera, backward_color, color_weight_matrix, render,
                     visible_faces)

BLUR_RADIUS = 4            # pixels, tuned for 256x256 painting views
BINARIZE_THRESHOLD = 0.5
INNER_STEPS = 60
LAMBDA_SSIM = 0.2
AZIMUTH_STEP = 30          # degrees
DEFAULT_ELEVATIONS = (0.0, 20.0, -20.0)
NORMAL_SCALE_FRACTION = 0.1


@dataclass
class PaintState:
    """Label bookkeeping over the editable faces plus the view schedule."""
    edit_faces: np.ndarray  # sorted face indices
    labels: np.ndarray      # uint8 aligned with edit_faces, 1 = uncolored
    schedule: list
    iteration: int = 0

    @classmethod
    def create(cls, edit_faces, schedule) -> "PaintState":
        edit_faces = np.asarray(sorted(set(int(f) for f in edit_faces)),
                                dtype=np.int64)
        return cls(edit_faces=edit_faces,
                   labels=np.ones(len(edit_faces), dtype=np.uint8),
                   schedule=list(schedule))

    def full_labels(self, num_faces: int) -> np.ndarray:
        out = np.zeros(num_faces, dtype=np.uint8)
        out[self.edit_faces] = self.labels
        return out

    @property
    def uncolored_count(self) -> int:
        return int(self.labels.sum())


def view_schedule(center, radius: float, elevations=DEFAULT_ELEVATIONS, *,
                  width: int = 256, height: int = 256, focal: float = 300.0,
                  up=(0.0, 0.0, 1.0)):
    """Orbit cameras aimed at ``center``: front/back pairs first, then the
    remaining azimuths at 30-degree spacing for each elevation."""
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    center = np.asarray(center, dtype=np.float64)

    def cam(azimuth_deg, elevation_deg):
        a = np.deg2rad(azimuth_deg)
        e = np.deg2rad(elevation_deg)
        direction = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a),
                              np.sin(e)])
        return Camera.look_at(center + radius * direction, center,
                              fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                              width=width, height=height, up=up)

    cameras = []
    for e in elevations:
        cameras.append(cam(0.0, e))
        cameras.append(cam(180.0, e))
    rest = [a for a in range(0, 360, AZIMUTH_STEP) if a not in (0, 180)]
    for e in elevations:
        for a in rest:
            cameras.append(cam(a, e))
    return cameras


def blur_mask(mask: np.ndarray, radius: float) -> np.ndarray:
    """Gaussian blur with sigma = radius, clamped to [0, 1]."""
    if radius < 0:
        raise ValueError("blur radius must be non-negative")
    mask = np.asarray(mask, dtype=np.float64)
    if radius == 0:
        return mask.copy()
    return np.clip(gaussian_filter(mask, sigma=radius), 0.0, 1.0)


def blend(painted: np.ndarray, rendered: np.ndarray,
          blurred_mask: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination steered by the blurred mask."""
    painted = np.asarray(painted, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    m = np.asarray(blurred_mask, dtype=np.float64)
    if painted.shape != rendered.shape or m.shape != painted.shape[:2]:
        raise ValueError("blend inputs have mismatched dimensions")
    m = m[..., None] if painted.ndim == 3 else m
    return m * painted + (1.0 - m) * rendered


def loss_recon(rendered: np.ndarray, target: np.ndarray,
               lambda_ssim: float = LAMBDA_SSIM) -> float:
    """Mean absolute error plus lambda * (1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("image dimensions differ")
    value = float(np.abs(rendered - target).mean())
    if lambda_ssim != 0.0:
        value += lambda_ssim * (1.0 - ssim(rendered, target))
    return value


# ---------------------------------------------------------------------------
# Differentiable reconstruction loss (torch), matching loss_recon
# ---------------------------------------------------------------------------

def _gaussian_kernel1d() -> torch.Tensor:
    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return torch.from_numpy(k / k.sum())


_SSIM_KERNEL = _gaussian_kernel1d()
_SSIM_RADIUS = (_SSIM_KERNEL.numel() - 1) // 2


def _sym_pad(img: torch.Tensor, r: int) -> torch.Tensor:
    """Symmetric (edge-repeating) padding of the two leading dimensions."""
    img = torch.cat([img[:r].flip(0), img, img[-r:].flip(0)], dim=0)
    return torch.cat([img[:, :r].flip(1), img, img[:, -r:].flip(1)], dim=1)


def _filt(img: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian filter over an (H, W) tensor."""
    r = _SSIM_RADIUS
    k = _SSIM_KERNEL
    padded = _sym_pad(img, r)
    rows = padded.unfold(0, 2 * r + 1, 1) @ k     # (H, W+2r)
    return rows.unfold(1, 2 * r + 1, 1) @ k       # (H, W)


def _ssim_torch_single(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    ux, uy = _filt(x), _filt(y)
    vx = _filt(x * x) - ux * ux
    vy = _filt(y * y) - uy * uy
    vxy = _filt(x * y) - ux * uy
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / \
        ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    r = _SSIM_RADIUS
    return s[r:-r, r:-r].mean()


def loss_recon_torch(rendered: torch.Tensor, target: torch.Tensor,
                     lambda_ssim: float = LAMBDA_SSIM) -> torch.Tensor:
    value = (rendered - target).abs().mean()
    if lambda_ssim != 0.0:
        s = torch.stack([_ssim_torch_single(rendered[..., c], target[..., c])
                         for c in range(rendered.shape[2])]).mean()
        value = value + lambda_ssim * (1.0 - s)
    return value


def image_loss_gradient(rendered: np.ndarray, target: np.ndarray,
                        lambda_ssim: float = LAMBDA_SSIM):
    """(loss value, dLoss/dRendered) for the reconstruction objective."""
    img = torch.tensor(rendered, dtype=torch.float64, requires_grad=True)
    loss = loss_recon_torch(img, torch.from_numpy(np.asarray(target, dtype=np.float64)),
                            lambda_ssim)
    loss.backward()
    return float(loss.detach()), img.grad.numpy()


# ---------------------------------------------------------------------------
# Subset selection
# ---------------------------------------------------------------------------

def back_projected_faces(mesh: ExtractedMesh, blurred_mask: np.ndarray,
                         camera: Camera, threshold: float, cell_size: float):
    """Faces whose visible centroid lands on the binarized mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    binary = np.asarray(blurred_mask) >= threshold
    vis, pixel = visible_faces(mesh, camera, 0.5 * cell_size)
    idx = np.flatnonzero(vis)
    hit = binary[pixel[idx, 1], pixel[idx, 0]]
    return idx[hit]


def trainable_subset(gaussians: GaussianSet, state: PaintState,
                     blurred_mask: np.ndarray, camera: Camera,
                     threshold: float = BINARIZE_THRESHOLD, *,
                     cell_size: float) -> np.ndarray:
    """Edit kernels on the faces back-projected from the binarized mask."""
    faces = back_projected_faces(gaussians.mesh, blurred_mask, camera,
                                 threshold, cell_size)
    selected = np.intersect1d(faces, state.edit_faces)
    return np.flatnonzero(np.isin(gaussians.face, selected)).astype(np.int64)


# ---------------------------------------------------------------------------
# Painters
# ---------------------------------------------------------------------------

class ViewPainter:
    """Turns (rendered view, normal map, uncolored mask) into supervision."""

    def paint(self, rendered: np.ndarray, normal_map: np.ndarray,
              mask: np.ndarray, camera: Camera) -> np.ndarray:
        raise NotImplementedError


class OraclePainter(ViewPainter):
    """Paints by rendering a ground-truth colored kernel scene."""

    def __init__(self, reference: GaussianSet, background=None):
        self.reference = reference
        self.background = background

    def paint(self, rendered, normal_map, mask, camera):
        out = render(self.reference, None, camera, channels=("color",),
                     background=self.background)
        return np.clip(out.color, 0.0, 1.0)


class NoisePainter(ViewPainter):
    """Oracle painting plus bounded, seed-determined pixel noise."""

    def __init__(self, base: ViewPainter, amplitude: float, seed: int):
        self.base = base
        self.amplitude = float(amplitude)
        self.rng = np.random.default_rng(seed)

    def paint(self, rendered, normal_map, mask, camera):
        img = self.base.paint(rendered, normal_map, mask, camera)
        noise = self.rng.uniform(-self.amplitude, self.amplitude, size=img.shape)
        return np.clip(img + noise, 0.0, 1.0)


# ---------------------------------------------------------------------------
# The paint loop
# ---------------------------------------------------------------------------

def paint_step(state: PaintState, gaussians: GaussianSet, painter: ViewPainter,
               camera: Camera | None = None, inner_steps: int = INNER_STEPS, *,
               cell_size: float, blur_radius: float = BLUR_RADIUS,
               threshold: float = BINARIZE_THRESHOLD,
               lambda_ssim: float = LAMBDA_SSIM, learning_rate: float = 0.05,
               background=None, report: dict | None = None):
    """One view of the progressive loop; returns (kernels, state) copies.

    If ``report`` is given, it is filled with the view's supervision image and
    reconstruction loss (before and after the color update) for logging.

    Kernels outside the view's trainable subset are bit-identical in the
    result, and labels only flip from uncolored to colored.
    """
    mesh = gaussians.mesh
    if camera is None:
        camera = state.schedule[state.iteration % len(state.schedule)]
    labels = state.full_labels(mesh.num_faces)
    out = render(gaussians, mesh, camera,
                 channels=("color", "alpha", "normal", "mask"),
                 labels=labels, background=background)

    mask = out.mask.astype(np.float64)
    painted = painter.paint(out.color, out.normal, mask, camera)
    painted = np.asarray(painted, dtype=np.float64)
    if painted.shape != out.color.shape:
        raise ValueError("painter returned an image of the wrong size")

    blurred = blur_mask(mask, blur_radius)
    supervision = blend(painted, out.color, blurred)

    # Faces handled by this view: the back-projection of the binarized mask,
    # plus visible still-uncolored faces (their pixels can be covered by
    # already-colored neighbors, which would otherwise leave them stuck).
    masked = back_projected_faces(mesh, blurred, camera, threshold, cell_size)
    vis, _ = visible_faces(mesh, camera, 0.5 * cell_size)
    uncolored_visible = state.edit_faces[(state.labels == 1)
                                         & vis[state.edit_faces]]
    faces = np.union1d(np.intersect1d(masked, state.edit_faces),
                       uncolored_visible)
    subset = np.flatnonzero(np.isin(gaussians.face, faces)).astype(np.int64)

    new_g = gaussians.copy()
    if len(subset) and inner_steps > 0:
        new_g.rgb = _optimize_colors(gaussians, camera, subset, supervision,
                                     out.alpha, inner_steps, lambda_ssim,
                                     learning_rate, background)

    new_labels = state.labels.copy()
    new_labels[np.isin(state.edit_faces, faces)] = 0
    new_state = replace(state, labels=new_labels, iteration=state.iteration + 1)
    if report is not None:
        after = render(new_g, mesh, camera, channels=("color",),
                       background=background).color
        report.update(
            camera=camera, supervision=supervision, faces_handled=len(faces),
            loss_before=loss_recon(out.color, supervision, lambda_ssim),
            loss_after=loss_recon(after, supervision, lambda_ssim))
    return new_g, new_state


def _optimize_colors(gaussians, camera, subset, target, alpha, steps,
                     lambda_ssim, learning_rate, background):
    """Inner color loop: compositing is linear in color once geometry and
    opacity are fixed, so the image is a sparse matrix product."""
    H, W = camera.height, camera.width
    Wmat = color_weight_matrix(gaussians, camera)
    rest = np.setdiff1d(np.arange(len(gaussians)), subset)
    base = (Wmat[:, rest] @ gaussians.rgb[rest]).reshape(H, W, 3)
    if background is not None:
        base = base + (1.0 - alpha)[..., None] * np.asarray(background, dtype=np.float64)

    sub = Wmat[:, subset].tocoo()
    w_t = torch.sparse_coo_tensor(
        np.stack([sub.row, sub.col]), sub.data, size=sub.shape,
        dtype=torch.float64, check_invariants=False).coalesce()
    base_t = torch.from_numpy(base)
    target_t = torch.from_numpy(np.asarray(target, dtype=np.float64))

    colors = torch.tensor(gaussians.rgb[subset], requires_grad=True)
    optimizer = torch.optim.AdamW([colors], lr=learning_rate, weight_decay=0.0)
    for _ in range(steps):
        optimizer.zero_grad()
        img = base_t + torch.sparse.mm(w_t, colors).reshape(H, W, 3)
        loss = loss_recon_torch(img, target_t, lambda_ssim)
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            colors.clamp_(0.0, 1.0)

    rgb = gaussians.rgb.copy()
    rgb[subset] = colors.detach().numpy()
    return rgb


def run_schedule(state: PaintState, gaussians: GaussianSet,
                 painter: ViewPainter, *, cell_size: float,
                 reports: list | None = None, **kwargs):
    """Apply paint_step over every scheduled view in order."""
    for _ in range(len(state.schedule)):
        report = None if reports is None else {}
        gaussians, state = paint_step(state, gaussians, painter,
                                      cell_size=cell_size, report=report,
                                      **kwargs)
        if reports is not None:
            reports.append(report)
    return gaussians, state


# ---------------------------------------------------------------------------
# Activation and refinement
# ---------------------------------------------------------------------------

def activate_attributes(gaussians: GaussianSet,
                        normal_scale_fraction: float = NORMAL_SCALE_FRACTION,
                        subset: np.ndarray | None = None) -> GaussianSet:
    """Lift restricted disks into free 3D Gaussians.

    The color lift is exact (degree-0 SH reproduces the rgb value); the
    normal-axis scale starts at a small fraction of the in-plane mean, which
    perturbs footprints slightly but keeps the image visually unchanged.
    ``subset`` limits activation to the given kernel indices (other kernels
    stay bit-identical, aside from gaining a zero row in the SH block).
    Idempotent: already-free kernels are returned as-is.
    """
    out = gaussians.copy()
    restricted = out.mode == MODE_RESTRICTED
    if subset is not None:
        chosen = np.zeros(len(out), dtype=bool)
        chosen[np.asarray(subset, dtype=np.int64)] = True
        restricted &= chosen
    if not restricted.any():
        return out
    if out.sh is None:
        out.sh = np.zeros((len(out), SH_COEFFS, 3))
    out.sh[restricted] = 0.0
    out.sh[restricted, 0, :] = (out.rgb[restricted] - 0.5) / SH_C0
    out.scale[restricted, 2] = (normal_scale_fraction
                                * out.scale[restricted, :2].mean(axis=1))
    out.mode[restricted] = MODE_FREE
    return out


def refine(gaussians: GaussianSet, images, steps: int, *,
           trainable: np.ndarray | None = None,
           lambda_ssim: float = LAMBDA_SSIM, learning_rate: float = 0.01,
           geometry_interval: int = 5, geometry_learning_rate: float = 1e-3,
           geometry_step: float = 1e-4, seed: int = 0,
           background=None) -> GaussianSet:
    """Multi-view reconstruction over color, opacity, tau, and scale.

    Color/opacity use the rasterizer's analytic gradients with AdamW; tau and
    per-axis log-scale take plain gradient steps from a simultaneous random
    perturbation estimate (two extra renders each), every
    ``geometry_interval`` iterations. Kernels outside ``trainable`` are
    bit-identical on return.
    """
    if not images:
        raise ValueError("refine requires at least one (camera, image) pair")
    mesh = gaussians.mesh
    if trainable is None:
        trainable = np.arange(len(gaussians))
    trainable = np.asarray(trainable, dtype=np.int64)
    if (gaussians.mode[trainable] != MODE_FREE).any():
        raise ValueError("trainable kernels must be activated before refinement")

    work = gaussians.copy()
    rng = np.random.default_rng(seed)

    sh_p = torch.tensor(work.sh[trainable], requires_grad=True)
    op_p = torch.tensor(work.opacity[trainable], requires_grad=True)
    optimizer = torch.optim.AdamW([sh_p, op_p], lr=learning_rate,
                                  weight_decay=0.0)

    def sync():
        work.sh[trainable] = sh_p.detach().numpy()
        work.opacity[trainable] = op_p.detach().numpy()

    def view_loss(g, camera, target):
        img = render(g, mesh, camera, channels=("color",),
                     background=background).color
        return loss_recon(img, target, lambda_ssim)

    for step in range(steps):
        camera, target = images[step % len(images)]
        sync()
        img = render(work, mesh, camera, channels=("color",),
                     background=background).color
        value, grad_img = image_loss_gradient(img, target, lambda_ssim)
        if value < 1e-8:
            continue  # view already reproduced; nothing to update
        bw = backward_color(work, mesh, camera, grad_img,
                            background=background)

        optimizer.zero_grad()
        # AdamW normalizes by the gradient's own magnitude, so floating-point
        # noise at a converged state would still produce lr-sized drift;
        # treat negligible components as exact zeros.
        grad_sh = bw.grad_sh[trainable].copy()
        grad_op = bw.grad_opacity[trainable].copy()
        grad_sh[np.abs(grad_sh) < 1e-10] = 0.0
        grad_op[np.abs(grad_op) < 1e-10] = 0.0
        sh_p.grad = torch.from_numpy(grad_sh)
        op_p.grad = torch.from_numpy(grad_op)
        optimizer.step()
        with torch.no_grad():
            op_p.clamp_(1e-3, 1.0)
        sync()

        if geometry_interval > 0 and (step + 1) % geometry_interval == 0:
            h = geometry_step
            delta = rng.choice([-1.0, 1.0], size=len(trainable))
            for attribute in ("tau", "scale"):
                plus, minus = work.copy(), work.copy()
                if attribute == "tau":
                    plus.tau[trainable] += h * delta
                    minus.tau[trainable] -= h * delta
                else:
                    factor = np.exp(h * delta)[:, None]
                    plus.scale[trainable] *= factor
                    minus.scale[trainable] /= factor
                g_est = delta * (view_loss(plus, camera, target)
                                 - view_loss(minus, camera, target)) / (2 * h)
                if attribute == "tau":
                    work.tau[trainable] -= geometry_learning_rate * g_est
                else:
                    work.scale[trainable] *= np.exp(np.clip(
                        -geometry_learning_rate * g_est, -0.1, 0.1))[:, None]

    sync()
    return work
