import numpy as np
import pytest
import torch

from tetgs.adapt import (
    AdaptConfig, AdaptState, GuidanceProvider, TargetSdfGuidance, adapt,
    differentiable_surface, loss_nc, loss_o, loss_p, loss_sa, loss_vton,
    objective,
)
from tetgs.errors import DivergenceError
from tetgs.extract import ExtractedMesh, extract
from tetgs.fields import SphereField, UnionField
from tetgs.grid import TetGrid, build_grid, sample_field
from tetgs.partition import freeze, partition_tets

UNIT_BOX = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
CENTER = (0.5, 0.5, 0.5)


def mesh_from(verts, faces):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    tri = verts[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norms = np.linalg.norm(cross, axis=1)
    return ExtractedMesh(
        verts=verts,
        source_edges=np.stack([np.arange(len(verts)),
                               np.arange(len(verts)) + 1000], axis=1).astype(np.int64),
        faces=faces,
        parent_tets=np.zeros(len(faces), dtype=np.int64),
        areas=0.5 * norms,
        normals=cross / norms[:, None],
    )


# ---------------------------------------------------------------------------
# loss_sa
# ---------------------------------------------------------------------------

def frozen_grid(num=1000, seed=0):
    rng = np.random.default_rng(seed)
    grid = build_grid(UNIT_BOX, 9)  # 10^3 = 1000 vertices
    assert grid.num_vertices == num
    grid.sdf = rng.normal(size=num)
    grid.frozen = np.ones(num, dtype=bool)
    return grid, rng


def test_loss_sa_zero_at_reference():
    grid, _ = frozen_grid()
    assert loss_sa(grid.sdf.copy(), grid) == 0.0


def test_loss_sa_single_term():
    grid = build_grid(UNIT_BOX, 1)
    grid.frozen[3] = True
    grid.sdf[:] = 0.0
    pred = np.zeros(grid.num_vertices)
    pred[3] = 0.1
    pred[5] = 7.0  # unfrozen: ignored
    assert loss_sa(pred, grid) == pytest.approx(0.01, abs=1e-15)


def test_loss_sa_matches_independent_sum():
    grid, rng = frozen_grid()
    pred = rng.normal(size=grid.num_vertices)
    expected = sum((pred[v] - grid.sdf[v]) ** 2
                   for v in range(grid.num_vertices) if grid.frozen[v])
    assert loss_sa(pred, grid) == pytest.approx(expected, rel=1e-12)


def test_loss_sa_length_mismatch():
    grid, _ = frozen_grid()
    with pytest.raises(ValueError):
        loss_sa(np.zeros(grid.num_vertices - 1), grid)


# ---------------------------------------------------------------------------
# loss_nc
# ---------------------------------------------------------------------------

def test_loss_nc_flat_mesh_zero():
    mesh = mesh_from([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]],
                     [[0, 1, 2], [2, 1, 3]])
    assert loss_nc(mesh) == pytest.approx(0.0, abs=1e-15)


def test_loss_nc_right_angle_edge():
    mesh = mesh_from([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                     [[0, 1, 2], [0, 3, 1]])
    # the two normals are orthogonal; single interior edge contributes 1
    assert loss_nc(mesh) == pytest.approx(1.0, abs=1e-12)


def test_loss_nc_decreases_with_resolution():
    field = SphereField(CENTER, 0.35)
    coarse = loss_nc(extract(sample_field(build_grid(UNIT_BOX, 8), field)))
    fine = loss_nc(extract(sample_field(build_grid(UNIT_BOX, 16), field)))
    assert fine < coarse


def test_loss_nc_requires_interior_edge():
    mesh = mesh_from([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        loss_nc(mesh)


# ---------------------------------------------------------------------------
# loss_p / loss_o / loss_vton
# ---------------------------------------------------------------------------

def test_loss_p_examples_and_oracle():
    n = np.array([[1.0, 0.0, 0.0]])
    assert loss_p([1.0], n, n) == 0.0
    assert loss_p([1.0], n, [[0.0, 1.0, 0.0]]) == pytest.approx(2.0, abs=1e-15)

    rng = np.random.default_rng(1)
    w = rng.uniform(size=100)
    a = rng.normal(size=(100, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = rng.normal(size=(100, 3))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    brute = sum(w[i] * np.dot(a[i] - b[i], a[i] - b[i]) for i in range(100))
    assert loss_p(w, a, b) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        loss_p(w[:5], a, b)


def test_loss_o_examples_and_oracle():
    d = np.array([0.0, 0.0, 1.0])
    assert loss_o([1.0], [[0.0, 0.0, -1.0]], d) == 0.0
    assert loss_o([1.0], [[0.0, 0.0, 1.0]], d) == pytest.approx(1.0, abs=1e-15)

    rng = np.random.default_rng(2)
    w = rng.uniform(size=64)
    n = rng.normal(size=(64, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    brute = sum(w[i] * max(0.0, float(n[i] @ d)) ** 2 for i in range(64))
    assert loss_o(w, n, d) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        loss_o(w[:3], n, d)


def test_loss_vton_examples_and_oracle():
    rng = np.random.default_rng(3)
    nf, nb = rng.uniform(size=(2, 8, 8, 3))
    mf = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)
    assert loss_vton((nf, nb), (nf, nb), mf, mf) == 0.0

    flipped = mf.copy()
    flipped.ravel()[:5] = 1.0 - flipped.ravel()[:5]
    assert loss_vton((nf, nb), (nf, nb), mf, flipped) == pytest.approx(
        5 / 64, abs=1e-15)

    nf2, nb2 = rng.uniform(size=(2, 8, 8, 3))
    mf2 = rng.uniform(size=(8, 8))
    expected = (0.03 * (((nf - nf2) ** 2).mean() + ((nb - nb2) ** 2).mean())
                + 1.0 * ((mf - mf2) ** 2).mean())
    got = loss_vton((nf, nb), (nf2, nb2), mf, mf2)
    assert got == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ValueError):
        loss_vton((nf, nb), (nf2, nb2[:4]), mf, mf2)


# ---------------------------------------------------------------------------
# adapt
# ---------------------------------------------------------------------------

def hemisphere_frozen_grid(resolution=8, field=None):
    field = field or SphereField(CENTER, 0.3)
    grid = sample_field(build_grid(UNIT_BOX, resolution), field)
    mesh = extract(grid)
    keep_faces = np.flatnonzero(mesh.face_centroids()[:, 2] <= CENTER[2])
    part = partition_tets(mesh, keep_faces, grid)
    return freeze(grid, part), part, field


def test_adapt_identity_at_optimum():
    grid, _, field = hemisphere_frozen_grid()
    cfg = AdaptConfig(steps=50, learning_rate=1e-2, lambda_sa=0.0, lambda_nc=0.0)
    out = adapt(grid, TargetSdfGuidance(field), cfg)
    assert np.abs(out.grid.sdf - grid.sdf).max() < 1e-6


def bump_field(field):
    return UnionField(field, SphereField((0.5, 0.5, 0.84), 0.12))


def test_adapt_hard_freeze_bitwise():
    grid, part, field = hemisphere_frozen_grid()
    target = bump_field(field)
    cfg = AdaptConfig(steps=100, learning_rate=5e-3, lambda_nc=1e-4, lambda_sa=1.0)
    out = adapt(grid, TargetSdfGuidance(target), cfg)
    assert np.array_equal(out.grid.sdf[part.keep_verts], grid.sdf[part.keep_verts])
    assert not np.array_equal(out.grid.sdf[part.edit_verts],
                              grid.sdf[part.edit_verts])


def test_adapt_soft_keep_drifts_but_is_penalized():
    grid, part, field = hemisphere_frozen_grid()
    target = bump_field(field)
    # nonzero normal-consistency couples frozen vertices to the edited
    # surface, so they can drift; the surface-aware term bounds that drift
    cfg = AdaptConfig(steps=100, learning_rate=5e-3, lambda_nc=1.0,
                      lambda_sa=5000.0, soft_keep=True)
    out = adapt(grid, TargetSdfGuidance(target), cfg)
    drift = np.abs(out.grid.sdf[part.keep_verts] - grid.sdf[part.keep_verts])
    assert drift.max() > 0  # frozen values are allowed to move
    assert drift.max() < 0.01  # but the surface-aware term keeps them pinned


def test_adapt_reduces_target_error():
    grid, part, field = hemisphere_frozen_grid(resolution=8)
    target = bump_field(field)
    tgt_vals = target(grid.vertices)
    before = np.abs(grid.sdf[part.edit_verts] - tgt_vals[part.edit_verts]).mean()
    cfg = AdaptConfig(steps=300, learning_rate=5e-3, lambda_nc=1e-4, lambda_sa=1.0)
    out = adapt(grid, TargetSdfGuidance(target), cfg)
    after = np.abs(out.grid.sdf[part.edit_verts] - tgt_vals[part.edit_verts]).mean()
    assert after < 0.2 * before


def test_adapt_descent_mostly_monotone():
    grid, _, field = hemisphere_frozen_grid()
    target = bump_field(field)
    cfg = AdaptConfig(steps=200, learning_rate=1e-4, lambda_nc=0.0, lambda_sa=0.0)
    out = adapt(grid, TargetSdfGuidance(target), cfg)
    total = out.history[:, 1]
    frac = (np.diff(total) <= 1e-15).mean()
    assert frac >= 0.95


def test_adapt_divergence_error_reports_step():
    grid, _, _ = hemisphere_frozen_grid()

    class ExplodingGuidance(GuidanceProvider):
        def __init__(self):
            self.calls = 0

        def loss_terms(self, state):
            self.calls += 1
            val = np.nan if self.calls > 3 else 0.0
            base = (state.sdf[torch.from_numpy(state.editable)] ** 2).mean()
            return base + val, torch.zeros((), dtype=torch.float64)

    with pytest.raises(DivergenceError) as err:
        adapt(grid, ExplodingGuidance(), AdaptConfig(steps=10, learning_rate=1e-3))
    assert err.value.step == 3


def test_objective_gradient_matches_fd():
    rng = np.random.default_rng(7)
    grid = build_grid(UNIT_BOX, 3)  # 64 vertices
    signs = rng.choice([-1.0, 1.0], size=grid.num_vertices)
    grid.sdf = signs * rng.uniform(0.05, 0.3, size=grid.num_vertices)
    grid.frozen = rng.uniform(size=grid.num_vertices) < 0.3
    guidance = TargetSdfGuidance(SphereField(CENTER, 0.25))
    cfg = AdaptConfig(steps=1, lambda_global=0.5, lambda_local=0.5,
                      lambda_sa=2.0, lambda_nc=1.5)
    reference = torch.from_numpy(grid.sdf.copy())

    sdf_t = torch.tensor(grid.sdf, requires_grad=True)
    total, _ = objective(grid, sdf_t, guidance, cfg, reference)
    total.backward()
    analytic = sdf_t.grad.numpy()[~grid.frozen]

    h = 1e-4 * grid.cell_size
    editable = np.flatnonzero(~grid.frozen)
    fd = np.zeros(len(editable))
    for j, v in enumerate(editable):
        vals = []
        for sign in (+1, -1):
            s = grid.sdf.copy()
            s[v] += sign * h
            t, _ = objective(grid, torch.from_numpy(s), guidance, cfg, reference)
            vals.append(float(t))
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    assert np.linalg.norm(analytic - fd) < 1e-3 * np.linalg.norm(fd)


def test_interpolated_vertex_position_derivative_matches_fd():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                         [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    grid = TetGrid(vertices=vertices, tets=np.array([[0, 1, 2, 3]], dtype=np.int64),
                   sdf=np.array([-0.7, 0.4, 0.9, 1.2]),
                   frozen=np.zeros(4, dtype=bool), cell_size=1.0)

    sdf_t = torch.tensor(grid.sdf, requires_grad=True)
    verts, _, _ = differentiable_surface(grid, sdf_t)
    verts[0, 0].backward()
    analytic = sdf_t.grad.numpy()

    h = 1e-7
    for v in range(4):
        sp, sm = grid.sdf.copy(), grid.sdf.copy()
        sp[v] += h
        sm[v] -= h
        vp, _, _ = differentiable_surface(grid, torch.from_numpy(sp))
        vm, _, _ = differentiable_surface(grid, torch.from_numpy(sm))
        fd = float(vp[0, 0] - vm[0, 0]) / (2 * h)
        assert analytic[v] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(lambda_sa=-1.0)
    with pytest.raises(ValueError):
        AdaptConfig(learning_rate=0.0)
