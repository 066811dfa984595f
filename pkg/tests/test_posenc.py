import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icoformer.numerics import Linear, Parameter, Tensor, grad_check, ops
from icoformer.numerics.ops import SparseOp
from icoformer.posenc import (GRID_SIZE, SinusoidSpec, bias_sampling_matrix, bilinear_weights,
                              relative_angles, rotation_matrices, sample_bias, sinusoid_phi)
from icoformer.sphere import icosphere, neighbor_table, node_coords, z_symmetry_permutation

from .oracles import bilinear, spherical_offsets


def test_sinusoid_examples():
    spec = SinusoidSpec()
    f = spec.frequencies
    assert f[0] == 1.0 and f[-1] == pytest.approx(10.0)
    assert np.all(np.diff(f) > 0)
    v = sinusoid_phi(np.pi / 2, spec)
    assert v.shape == (32,)
    np.testing.assert_allclose(v[:16], 0.0, atol=1e-15)
    np.testing.assert_allclose(v[16:], 1.0)
    top, bottom = sinusoid_phi(0.0, spec), sinusoid_phi(np.pi, spec)
    np.testing.assert_allclose(top[:16], -bottom[:16], atol=1e-12)
    np.testing.assert_allclose(top[16:], bottom[16:], atol=1e-12)
    with pytest.raises(ValueError):
        SinusoidSpec(num_freqs=1)


def test_positional_projection():
    rng = np.random.default_rng(0)
    proj = Linear(32, 32, rng, np.float64)
    proj.bias.data = rng.normal(size=32)
    out = proj(Tensor(np.zeros((1, 32))))
    np.testing.assert_allclose(out.data[0], proj.bias.data)
    proj.weight.data = np.eye(32)
    proj.bias.data[:] = 0
    v = sinusoid_phi(np.array([0.3]))
    np.testing.assert_allclose(proj(Tensor(v)).data, v)
    assert Linear(32, 32, rng)(Tensor(v.astype(np.float32))).shape == (1, 32)
    with pytest.raises(ValueError):
        proj(Tensor(np.zeros((1, 16))))


def test_rotation_sends_nodes_to_reference_point():
    g = icosphere(2)
    c = node_coords(g, "hex")
    rot = rotation_matrices(c[:, 0], c[:, 1])
    from icoformer.posenc import _to_cartesian
    p = _to_cartesian(c[:, 0], c[:, 1])
    moved = np.einsum("nij,nj->ni", rot, p)
    np.testing.assert_allclose(moved, np.tile([1.0, 0.0, 0.0], (len(p), 1)), atol=1e-12)
    np.testing.assert_allclose(np.einsum("nij,nkj->nik", rot, rot), np.tile(np.eye(3), (len(p), 1, 1)),
                               atol=1e-12)


@pytest.mark.parametrize("k", [1, 2])
def test_relative_angles_match_spherical_trig(k):
    g = icosphere(3)
    rel = relative_angles(g, "hex", k)
    c = node_coords(g, "hex")
    t = rel.neighbors
    i_idx = np.repeat(np.arange(len(c)), t.width).reshape(t.indices.shape)
    m = t.mask & (np.sin(c[:, 1]) > 1e-9)[:, None]
    dth, dph = spherical_offsets(c[i_idx[m], 0], c[i_idx[m], 1], c[t.indices[m], 0], c[t.indices[m], 1])
    assert np.max(np.abs(rel.raw[m][:, 0] - dth)) < 1e-9
    assert np.max(np.abs(rel.raw[m][:, 1] - dph)) < 1e-9
    self_slots = t.indices == np.arange(len(c))[:, None]
    assert np.all(rel.raw[self_slots] == 0.0)


def test_relative_angle_signs_on_equator():
    g = icosphere(2)
    rel = relative_angles(g, "hex", 1)
    c = node_coords(g, "hex")
    # an equatorial-ish node: pick the one closest to phi = pi/2
    i = int(np.argmin(np.abs(c[:, 1] - np.pi / 2)))
    for s, j in enumerate(rel.neighbors.indices[i]):
        if j < 0 or j == i:
            continue
        dth, dph = rel.raw[i, s]
        east = np.sin(c[j, 0] - c[i, 0])
        if abs(east) > 1e-3:
            assert np.sign(dth) == np.sign(east)
        if abs(c[j, 1] - c[i, 1]) > 1e-3:
            assert np.sign(dph) == np.sign(c[j, 1] - c[i, 1])


def test_pole_rows():
    g = icosphere(3)
    rel = relative_angles(g, "hex", 1)
    north = rel.raw[0][rel.neighbors.mask[0]]
    south = rel.raw[11][rel.neighbors.mask[11]]
    assert np.all(north[:, 0] == 0) and np.all(south[:, 0] == 0)
    assert np.all(north[1:, 1] > 0) and np.all(south[1:, 1] < 0)


@pytest.mark.parametrize("nt", ["hex", "ico"])
def test_relpos_invariant_under_symmetry(nt):
    g = icosphere(3)
    rel = relative_angles(g, nt, 2)
    t = rel.neighbors
    for k in range(1, 5):
        perm = z_symmetry_permutation(g, nt, k).perm
        for i in range(0, g.node_count(nt), 7):
            pi = perm[i]
            mine = {int(j): rel.raw[i, s] for s, j in enumerate(t.indices[i]) if j >= 0}
            theirs = {int(j): rel.raw[pi, s] for s, j in enumerate(t.indices[pi]) if j >= 0}
            for j, v in mine.items():
                np.testing.assert_allclose(theirs[int(perm[j])], v, atol=1e-9)


def test_normalization():
    rel = relative_angles(icosphere(3), "ico", 2)
    n = rel.normalized[rel.neighbors.mask]
    assert np.abs(n).max(axis=0) == pytest.approx([1.0, 1.0])
    np.testing.assert_allclose(rel.raw / np.array(rel.scale), rel.normalized)
    rel0 = relative_angles(icosphere(2), "hex", 0)
    assert np.all(rel0.normalized == 0) and rel0.scale == (1.0, 1.0)


def test_sample_bias_examples():
    grid = np.arange(49.0).reshape(7, 7)
    assert sample_bias(grid, [0.0, 0.0])[0] == grid[3, 3]
    assert sample_bias(grid, [-1.0, -1.0])[0] == grid[0, 0]
    assert sample_bias(grid, [1.0, 1.0])[0] == grid[6, 6]
    assert sample_bias(grid, [1.0, -1.0])[0] == grid[0, 6]
    # every lattice point returns its own parameter
    ax = np.linspace(-1, 1, 7)
    for r, y in enumerate(ax):
        for c, x in enumerate(ax):
            assert sample_bias(grid, [x, y])[0] == pytest.approx(grid[r, c])
    with pytest.raises(ValueError):
        sample_bias(grid, [1.01, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_bilinear_matches_textbook(x, y):
    grid = np.random.default_rng(3).normal(size=(7, 7))
    assert sample_bias(grid, [x, y])[0] == pytest.approx(bilinear(grid, (x, y)), abs=1e-12)
    _, w = bilinear_weights(np.array([[x, y]]))
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def test_bias_sampling_gradient():
    rng = np.random.default_rng(0)
    rel = relative_angles(icosphere(2), "hex", 1)
    op = SparseOp(bias_sampling_matrix(rel))
    grid = Parameter(rng.normal(size=(GRID_SIZE * GRID_SIZE, 2)), name="grid")
    r = rng.normal(size=(op.shape[0], 2))
    res = grad_check(lambda: ops.sum_all(ops.mul(op(grid), Tensor(r))), [grid])
    assert res.max_rel_error < 1e-6


def test_symmetric_sampling_is_mirror_average():
    rel = relative_angles(icosphere(2), "hex", 1)
    grid = np.random.default_rng(1).normal(size=(7, 7))
    m = bias_sampling_matrix(rel, symmetric=True)
    vals = m @ grid.reshape(-1)
    pts = rel.normalized.reshape(-1, 2)
    mask = rel.neighbors.mask.reshape(-1)
    expect = 0.5 * (sample_bias(grid, pts) + sample_bias(grid, pts * [-1, 1]))
    np.testing.assert_allclose(vals[mask], expect[mask], atol=1e-12)
    assert np.all(vals[~mask] == 0)


def test_neighbor_table_reuse():
    g = icosphere(2)
    t = neighbor_table(g, "hex", 1)
    assert relative_angles(g, "hex", 1, table=t).neighbors is t
