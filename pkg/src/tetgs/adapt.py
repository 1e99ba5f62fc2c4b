"""SDF-space spatial adaptation of the tetrahedral grid.

The editable vertices' SDF values are optimized with AdamW under a pluggable
guidance objective plus two regularizers: a surface-aware term pinning frozen
vertices to their reference values and a normal-consistency term smoothing
the extracted surface. Mesh connectivity is re-extracted every step from the
current sign pattern; within a step, extracted vertex positions are
differentiable in the endpoint SDF values through the closed-form linear
interpolation, so mesh-level losses propagate back to the grid.

The module also hosts standalone reconstruction/try-on losses used by other
stages (``loss_p``, ``loss_o``, ``loss_vton``).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .errors import DivergenceError
from .extract import ZERO_SDF_NUDGE, ExtractedMesh, surface_topology
from .fields import ScalarField
from .grid import TetGrid

LAMBDA_GLOBAL_DEFAULT = 0.5
LAMBDA_LOCAL_DEFAULT = 0.5
LAMBDA_SA_DEFAULT = 5000.0
LAMBDA_NC_DEFAULT = 2000.0
LAMBDA_NORM = 0.03
LAMBDA_MASK = 1.0


# ---------------------------------------------------------------------------
# Pure loss functions (numpy)
# ---------------------------------------------------------------------------

def loss_sa(predicted_sdf, grid: TetGrid, reference_sdf=None) -> float:
    """Sum of squared drift of frozen vertices from their reference values."""
    predicted_sdf = np.asarray(predicted_sdf, dtype=np.float64)
    if len(predicted_sdf) != grid.num_vertices:
        raise ValueError("predicted sdf length does not match the grid")
    ref = grid.sdf if reference_sdf is None else np.asarray(reference_sdf)
    d = predicted_sdf[grid.frozen] - ref[grid.frozen]
    return float((d * d).sum())


def interior_edge_face_pairs(faces: np.ndarray) -> np.ndarray:
    """(E, 2) face-index pairs sharing an interior mesh edge."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    owner = np.tile(np.arange(len(faces)), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    same = (e[1:] == e[:-1]).all(axis=1)
    return np.stack([owner[:-1][same], owner[1:][same]], axis=1)


def loss_nc(mesh: ExtractedMesh) -> float:
    """Mean (1 - cos dihedral) over interior edges; 0 for a flat mesh."""
    pairs = interior_edge_face_pairs(mesh.faces)
    if len(pairs) == 0:
        raise ValueError("mesh has no interior edge")
    cos = np.einsum("ij,ij->i", mesh.normals[pairs[:, 0]], mesh.normals[pairs[:, 1]])
    return float((1.0 - cos).mean())


def loss_p(weights, ref_normals, pred_normals) -> float:
    """Weighted sum of squared normal differences."""
    weights = np.asarray(weights, dtype=np.float64)
    ref_normals = np.asarray(ref_normals, dtype=np.float64)
    pred_normals = np.asarray(pred_normals, dtype=np.float64)
    if not (len(weights) == len(ref_normals) == len(pred_normals)):
        raise ValueError("mismatched sample counts")
    d = ref_normals - pred_normals
    return float((weights * (d * d).sum(axis=1)).sum())


def loss_o(weights, normals, ray_dir) -> float:
    """Weighted sum of clamped squared alignment with the ray direction."""
    weights = np.asarray(weights, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if len(weights) != len(normals):
        raise ValueError("mismatched sample counts")
    dots = np.maximum(normals @ np.asarray(ray_dir, dtype=np.float64), 0.0)
    return float((weights * dots * dots).sum())


def loss_vton(rendered_normals, target_normals, rendered_mask, target_mask,
              lambda_norm: float = LAMBDA_NORM,
              lambda_mask: float = LAMBDA_MASK) -> float:
    """Front/back normal MSE plus front mask MSE, per-term weighted.

    ``rendered_normals``/``target_normals`` are (front, back) image pairs.
    """
    norm_term = 0.0
    for ren, tgt in zip(rendered_normals, target_normals):
        ren = np.asarray(ren, dtype=np.float64)
        tgt = np.asarray(tgt, dtype=np.float64)
        if ren.shape != tgt.shape:
            raise ValueError("normal image dimensions differ")
        norm_term += float(((ren - tgt) ** 2).mean())
    rm = np.asarray(rendered_mask, dtype=np.float64)
    tm = np.asarray(target_mask, dtype=np.float64)
    if rm.shape != tm.shape:
        raise ValueError("mask image dimensions differ")
    return lambda_norm * norm_term + lambda_mask * float(((rm - tm) ** 2).mean())


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------

class GuidanceProvider:
    """Pluggable editing objective.

    Implementations return two torch scalars (global, local) from the current
    differentiable state; gradients must not touch frozen vertices, which is
    guaranteed when only entries flagged by ``state.editable`` are read.
    """

    def loss_terms(self, state: "AdaptState"):
        raise NotImplementedError


@dataclass
class AdaptState:
    """Differentiable snapshot of one adaptation step."""
    grid: TetGrid
    sdf: torch.Tensor        # (V,) current full sdf, requires grad
    editable: np.ndarray     # (V,) bool
    verts: torch.Tensor      # (M, 3) extracted vertex positions
    faces: np.ndarray        # (F, 3)
    parent_tets: np.ndarray  # (F,)
    crossing_verts: np.ndarray  # (V,) bool, vertex of a sign-change tet


class TargetSdfGuidance(GuidanceProvider):
    """Pulls editable SDF values toward a target field.

    The global term averages the squared error over every editable vertex;
    the local term restricts it to editable vertices of surface-crossing
    tetrahedra, concentrating pressure near the current interface.
    """

    def __init__(self, target: ScalarField, weight_global: float = 1.0,
                 weight_local: float = 1.0):
        self.target = target
        self.weight_global = weight_global
        self.weight_local = weight_local
        self._cache = {}

    def _target_values(self, grid: TetGrid) -> torch.Tensor:
        key = id(grid)
        if key not in self._cache:
            self._cache[key] = torch.from_numpy(
                np.asarray(self.target.evaluate(grid.vertices), dtype=np.float64))
        return self._cache[key]

    def loss_terms(self, state: AdaptState):
        tgt = self._target_values(state.grid)
        editable = torch.from_numpy(state.editable)
        err = (state.sdf - tgt) ** 2
        glob = self.weight_global * err[editable].mean()
        local_mask = torch.from_numpy(state.crossing_verts & state.editable)
        if bool(local_mask.any()):
            local = self.weight_local * err[local_mask].mean()
        else:
            local = torch.zeros((), dtype=torch.float64)
        return glob, local


@dataclass
class AdaptConfig:
    steps: int = 1000
    learning_rate: float = 1e-3
    lambda_global: float = LAMBDA_GLOBAL_DEFAULT
    lambda_local: float = LAMBDA_LOCAL_DEFAULT
    lambda_sa: float = LAMBDA_SA_DEFAULT
    lambda_nc: float = LAMBDA_NC_DEFAULT
    soft_keep: bool = False

    def __post_init__(self):
        if min(self.lambda_global, self.lambda_local,
               self.lambda_sa, self.lambda_nc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("invalid optimizer settings")


@dataclass
class AdaptResult:
    grid: TetGrid
    history: np.ndarray  # (steps, 6): step, total, global, local, sa, nc


def differentiable_surface(grid: TetGrid, sdf: torch.Tensor):
    """Extract connectivity from the current signs; positions stay on the tape.

    Topology (which edges cross, face lists, parent tets) is decided from the
    detached values, so a configuration flip contributes no gradient on the
    step it happens; positions use the closed-form zero of the linear model
    and are differentiable in both endpoint SDF values.
    """
    nudge = ZERO_SDF_NUDGE * grid.cell_size
    sdf_np = sdf.detach().numpy().copy()
    sdf_np[sdf_np == 0.0] = nudge
    edges, faces, parent = surface_topology(grid.tets, sdf_np)

    sdf_eff = torch.where(sdf == 0.0, torch.full_like(sdf, nudge), sdf)
    va = torch.from_numpy(grid.vertices[edges[:, 0]])
    vb = torch.from_numpy(grid.vertices[edges[:, 1]])
    sa = sdf_eff[edges[:, 0]].unsqueeze(1)
    sb = sdf_eff[edges[:, 1]].unsqueeze(1)
    verts = (va * sb - vb * sa) / (sb - sa)
    return verts, faces, parent


def _normal_consistency(verts: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    pairs = interior_edge_face_pairs(faces)
    if len(pairs) == 0:
        return torch.zeros((), dtype=torch.float64)
    tri = verts[torch.from_numpy(faces)]
    n = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=1)
    n = n / torch.linalg.norm(n, dim=1, keepdim=True).clamp_min(1e-30)
    cos = (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(dim=1)
    return (1.0 - cos).mean()


def objective(grid: TetGrid, sdf: torch.Tensor, guidance: GuidanceProvider,
              config: AdaptConfig, reference_sdf: torch.Tensor):
    """Total adaptation loss and its components for the given full sdf."""
    editable = ~grid.frozen
    verts, faces, parent = differentiable_surface(grid, sdf)
    signs = sdf.detach().numpy() > 0
    tet_signs = signs[grid.tets]
    crossing = ~(tet_signs.all(axis=1) | (~tet_signs).all(axis=1))
    crossing_verts = np.zeros(grid.num_vertices, dtype=bool)
    crossing_verts[np.unique(grid.tets[crossing])] = True

    state = AdaptState(grid=grid, sdf=sdf, editable=editable, verts=verts,
                       faces=faces, parent_tets=parent,
                       crossing_verts=crossing_verts)
    glob, local = guidance.loss_terms(state)
    frozen = torch.from_numpy(grid.frozen)
    drift = sdf[frozen] - reference_sdf[frozen]
    sa = (drift * drift).sum()
    nc = _normal_consistency(verts, faces)
    total = (config.lambda_global * glob + config.lambda_local * local
             + config.lambda_sa * sa + config.lambda_nc * nc)
    return total, (glob, local, sa, nc)


def adapt(grid: TetGrid, guidance: GuidanceProvider,
          config: AdaptConfig) -> AdaptResult:
    """Optimize editable SDF values for ``config.steps`` AdamW iterations.

    With ``soft_keep=False`` the frozen entries are not parameters at all and
    come out bit-identical; with ``soft_keep=True`` every vertex is trainable
    and the surface-aware term penalizes drift of the frozen reference.
    """
    grid.validate()
    base = grid.sdf.copy()
    reference = torch.from_numpy(base.copy())
    train_idx = np.arange(grid.num_vertices) if config.soft_keep \
        else np.flatnonzero(~grid.frozen)
    params = torch.tensor(base[train_idx], dtype=torch.float64, requires_grad=True)
    const = torch.from_numpy(base.copy())
    optimizer = torch.optim.AdamW([params], lr=config.learning_rate,
                                  weight_decay=0.0)
    train_idx_t = torch.from_numpy(train_idx)

    history = np.zeros((config.steps, 6))
    for step in range(config.steps):
        optimizer.zero_grad()
        sdf = const.clone()
        sdf[train_idx_t] = params
        total, (glob, local, sa, nc) = objective(grid, sdf, guidance,
                                                 config, reference)
        if not torch.isfinite(total):
            raise DivergenceError(step)
        total.backward()
        optimizer.step()
        history[step] = (step, total.detach().item(), glob.detach().item(),
                         local.detach().item(), sa.detach().item(),
                         nc.detach().item())

    out = grid.copy()
    out.sdf = base
    out.sdf[train_idx] = params.detach().numpy()
    return AdaptResult(grid=out, history=history)
