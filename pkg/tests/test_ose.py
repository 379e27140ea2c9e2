import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaussocc._validation import ValidationError
from gaussocc.gaussians import SceneBox, sigmoid
from gaussocc.ose import (
    OFFSETS_3,
    SparseConvLayer,
    SparseGaussianTensor,
    multiscale_self_encode,
    ogspconv,
    pool,
    submanifold_conv,
    voxelize_queries,
)

BOX = SceneBox((0.0, 0.0, 0.0), (4.8, 4.8, 2.88), 0.08)


def tensor(coords, feats, gate=None):
    coords = np.asarray(coords, dtype=np.int64)
    m = len(coords)
    gate = np.zeros(m) if gate is None else np.asarray(gate, float)
    return SparseGaussianTensor(coords, np.asarray(feats, float), np.arange(m), gate)


def random_tensor(rng, m=20, c=4, size=5):
    cells = rng.choice(size**3, size=m, replace=False)
    coords = np.stack(np.unravel_index(np.sort(cells), (size,) * 3), axis=1)
    return tensor(coords, rng.normal(size=(m, c)), rng.normal(size=m))


def dense_conv_oracle(t, layer, size):
    """Dense 3D convolution over a zero-filled grid, read back at the occupied cells."""
    c_in = t.feats.shape[1]
    pad = np.zeros((size + 2,) * 3 + (c_in,))
    for (x, y, z), f in zip(t.coords, t.feats):
        pad[x + 1, y + 1, z + 1] = f
    offsets = OFFSETS_3 if layer.kernel_size == 3 else np.zeros((1, 3), int)
    out = []
    for x, y, z in t.coords:
        acc = layer.bias.copy()
        for k, (dx, dy, dz) in enumerate(offsets):
            acc = acc + pad[x + 1 + dx, y + 1 + dy, z + 1 + dz] @ layer.weights[k]
        out.append(acc)
    return np.array(out)


# voxelization


def test_voxelize_distinct_cells_pass_through():
    means = np.array([[0.05, 0.05, 0.05], [1.0, 1.0, 1.0]])
    q = np.array([[1.0, 2.0], [3.0, 4.0]])
    t = voxelize_queries(means, q, np.array([0.1, -0.3]), 0.16, BOX)
    np.testing.assert_array_equal(t.coords, [[0, 0, 0], [6, 6, 6]])
    np.testing.assert_array_equal(t.feats, q)
    np.testing.assert_array_equal(t.gate_opacity, [0.1, -0.3])


def test_voxelize_shared_cell_averages_and_takes_max_gate():
    means = np.array([[0.01, 0.01, 0.01], [0.15, 0.15, 0.15]])
    q = np.array([[1.0, 2.0], [3.0, 6.0]])
    t = voxelize_queries(means, q, np.array([-1.0, 2.0]), 0.16, BOX)
    np.testing.assert_array_equal(t.coords, [[0, 0, 0]])
    np.testing.assert_array_equal(t.feats, [[2.0, 4.0]])
    assert t.gate_opacity[0] == 2.0
    assert [list(o) for o in t.owners] == [[0, 1]]


def test_voxelize_clamps_outside_means(caplog):
    means = np.array([[-1.0, 0.5, 0.5], [0.5, 0.5, 10.0]])
    with caplog.at_level(logging.WARNING):
        t = voxelize_queries(means, np.zeros((2, 1)), np.zeros(2), 0.16, BOX)
    assert t.clamped == 2
    assert "clamped" in caplog.text
    np.testing.assert_array_equal(t.coords, [[0, 3, 3], [3, 3, 17]])


def test_voxelize_counting_oracle():
    rng = np.random.default_rng(0)
    means = rng.uniform(0, 1, size=(16200, 3)) * np.asarray(BOX.extent)
    t = voxelize_queries(means, np.zeros((16200, 1)), np.zeros(16200), 0.16, BOX)
    cells = {tuple(int(v) for v in np.floor(m / 0.16)) for m in means}
    assert t.num_cells == len(cells) <= 30 * 30 * 18
    assert set(map(tuple, t.coords.tolist())) == cells


def test_voxelize_owners_partition(rng):
    means = rng.uniform(0, 1, size=(300, 3)) * np.asarray(BOX.extent)
    t = voxelize_queries(means, rng.normal(size=(300, 2)), rng.normal(size=300), 0.32, BOX)
    owners = np.concatenate(t.owners)
    np.testing.assert_array_equal(np.sort(owners), np.arange(300))
    assert len(np.unique(t.coords, axis=0)) == t.num_cells
    with pytest.raises(ValidationError):
        voxelize_queries(means, np.zeros((3, 2)), np.zeros(300), 0.32, BOX)


# convolutions


def test_identity_1x1_keeps_features(rng):
    t = random_tensor(rng)
    out = submanifold_conv(t, SparseConvLayer.identity(1, 4))
    np.testing.assert_array_equal(out.feats, t.feats)
    np.testing.assert_array_equal(out.coords, t.coords)


def test_single_cell_uses_center_weight(rng):
    t = tensor([[2, 2, 2]], rng.normal(size=(1, 3)))
    layer = SparseConvLayer.init(3, 3, 3, rng, scale=1.0)
    layer.bias[:] = rng.normal(size=3)
    out = submanifold_conv(t, layer)
    np.testing.assert_allclose(out.feats[0], t.feats[0] @ layer.weights[13] + layer.bias, atol=1e-15)


@given(st.integers(0, 10_000))
def test_submanifold_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, m=int(rng.integers(1, 60)), c=3, size=5)
    layer = SparseConvLayer.init(3, 3, 2, rng, scale=1.0)
    layer.bias[:] = rng.normal(size=2)
    out = submanifold_conv(t, layer)
    np.testing.assert_array_equal(out.coords, t.coords)
    np.testing.assert_allclose(out.feats, dense_conv_oracle(t, layer, 5), atol=1e-10)


def test_conv_validation():
    with pytest.raises(ValidationError):
        SparseConvLayer(np.zeros((9, 2, 2)), np.zeros(2))
    with pytest.raises(ValidationError):
        SparseConvLayer(np.full((1, 2, 2), np.inf), np.zeros(2))
    with pytest.raises(ValidationError):
        SparseConvLayer(np.zeros((1, 2, 2)), np.zeros(2), stride=2)
    with pytest.raises(ValidationError):
        submanifold_conv(tensor([[0, 0, 0]], [[1.0, 2.0, 3.0]]), SparseConvLayer.identity(1, 2))


# gated convolution


def test_zero_conv1_and_zero_logit_gives_conv3_exactly(rng):
    t = random_tensor(rng)
    t.gate_opacity[:] = 0.0
    conv3 = SparseConvLayer.init(3, 4, 4, rng, scale=0.5)
    conv1 = SparseConvLayer.init(1, 4, 4)
    out = ogspconv(t, conv3, conv1)
    np.testing.assert_array_equal(out.feats, submanifold_conv(t, conv3).feats)


def test_saturated_opacity_difference_is_conv3(rng):
    t = random_tensor(rng)
    conv3 = SparseConvLayer.init(3, 4, 4, rng, scale=0.5)
    conv1 = SparseConvLayer.init(1, 4, 4)
    lo = ogspconv(SparseGaussianTensor(t.coords, t.feats, t.owner, np.full(t.num_cells, -20.0)), conv3, conv1)
    hi = ogspconv(SparseGaussianTensor(t.coords, t.feats, t.owner, np.full(t.num_cells, 20.0)), conv3, conv1)
    base = submanifold_conv(t, conv3).feats
    np.testing.assert_allclose(hi.feats - lo.feats, base, atol=1e-8 * np.abs(base).max())


@given(st.integers(0, 10_000))
def test_gate_bounds_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, m=15, c=3)
    conv3 = SparseConvLayer.init(3, 3, 3, rng, scale=1.0)
    conv1 = SparseConvLayer.init(1, 3, 3, rng, scale=2.0)
    main = submanifold_conv(t, conv3).feats
    out = ogspconv(t, conv3, conv1).feats
    so = sigmoid(t.gate_opacity)[:, None]
    assert np.all(np.abs(out) <= np.abs(main) * (so + 1) + 1e-12)
    nz = np.abs(main) > 1e-9
    gate = out[nz] / main[nz]
    lower = np.broadcast_to(so, main.shape)[nz]
    assert np.all(gate > lower - 1e-10) and np.all(gate < lower + 1 + 1e-10)
    bumped = SparseGaussianTensor(t.coords, t.feats, t.owner, t.gate_opacity + 0.5)
    out2 = ogspconv(bumped, conv3, conv1).feats
    # larger opacity never shrinks the gate
    assert np.all(np.abs(out2) >= np.abs(out) - 1e-12)


def test_ogspconv_checks_shapes(rng):
    t = random_tensor(rng)
    conv3 = SparseConvLayer.init(3, 4, 4)
    with pytest.raises(ValidationError):
        ogspconv(t, conv3, SparseConvLayer.init(1, 4, 3))
    with pytest.raises(ValidationError):
        ogspconv(t, SparseConvLayer.init(1, 4, 4), SparseConvLayer.init(1, 4, 4))


def test_submanifold_invariance_through_layers(rng):
    t = random_tensor(rng)
    conv3 = SparseConvLayer.init(3, 4, 4, rng)
    conv1 = SparseConvLayer.init(1, 4, 4, rng)
    out = ogspconv(ogspconv(t, conv3, conv1), conv3, conv1)
    np.testing.assert_array_equal(out.coords, t.coords)


# multi-scale


def identity_stack(c, scales):
    return [(SparseConvLayer.identity(3, c), SparseConvLayer.init(1, c, c)) for _ in range(scales)]


def test_single_scale_identity_residual(rng):
    means = rng.uniform(0, 1, size=(40, 3)) * np.asarray(BOX.extent)
    q = rng.normal(size=(40, 3))
    t = voxelize_queries(means, q, np.zeros(40), 0.16, BOX)
    out = multiscale_self_encode(t, identity_stack(3, 1), 1, q)
    np.testing.assert_array_equal(out, q + t.feats[t.owner])


def _pair(offset_cells, scales, rng):
    means = np.array([[0.4, 0.4, 0.4], [0.4 + 0.16 * offset_cells, 0.4, 0.4]])
    q = rng.normal(size=(2, 3))
    layers = [(SparseConvLayer.init(3, 3, 3, rng, scale=1.0), SparseConvLayer.init(1, 3, 3, rng, scale=1.0))
              for _ in range(scales)]

    def run(qq):
        t = voxelize_queries(means, qq, np.zeros(2), 0.16, BOX)
        return multiscale_self_encode(t, layers, scales, qq)

    base = run(q)
    q2 = q.copy()
    q2[1] += 1.0
    return np.abs(run(q2)[0] - base[0]).max()


def test_distant_gaussians_do_not_interact(rng):
    assert _pair(5, 1, rng) == 0.0


def test_coarse_scale_couples_gaussians_three_cells_apart(rng):
    # cells 2 and 5 are not neighbors at stride 1; their parents 1 and 2 are neighbors at stride 2
    assert _pair(3, 1, rng) == 0.0
    assert _pair(3, 2, rng) > 1e-6


def test_permutation_equivariance(rng):
    means = rng.uniform(0, 1, size=(60, 3)) * np.asarray(BOX.extent) * 0.3
    q = rng.normal(size=(60, 3))
    o = rng.normal(size=60)
    layers = [(SparseConvLayer.init(3, 3, 3, rng, 1.0), SparseConvLayer.init(1, 3, 3, rng, 1.0)) for _ in range(2)]
    perm = rng.permutation(60)
    a = multiscale_self_encode(voxelize_queries(means, q, o, 0.16, BOX), layers, 2, q)
    b = multiscale_self_encode(voxelize_queries(means[perm], q[perm], o[perm], 0.16, BOX), layers, 2, q[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_pool_mean_and_max(rng):
    t = tensor([[0, 0, 0], [1, 1, 1], [2, 0, 0]], [[1.0], [3.0], [5.0]], [0.1, 0.7, -1.0])
    coarse, parent = pool(t, 2)
    np.testing.assert_array_equal(coarse.coords, [[0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(coarse.feats, [[2.0], [5.0]])
    np.testing.assert_array_equal(coarse.gate_opacity, [0.7, -1.0])
    np.testing.assert_array_equal(parent, [0, 0, 1])


def test_multiscale_validation(rng):
    t = random_tensor(rng)
    with pytest.raises(ValidationError):
        multiscale_self_encode(t, identity_stack(4, 1), 0, t.feats)
    with pytest.raises(ValidationError):
        multiscale_self_encode(t, identity_stack(4, 1), 2, t.feats)
