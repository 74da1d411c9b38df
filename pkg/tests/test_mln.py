import numpy as np
import pytest
from hypothesis import given, strategies as st

from querystream import mln as M
from querystream.autodiff import tensor as T
from querystream.autodiff.gradcheck import finite_diff_check
from querystream.autodiff.nn import Params
from querystream.autodiff.tensor import Tape, Tensor, backward
from querystream.errors import ShapeError
from querystream.geometry import Pose, rot_z


def mln_params(d=6, seed=0, randomize=True, hidden=True):
    rng = np.random.default_rng(seed)
    p = Params()
    M.add_mln_params(p, "mln", M.MlnSpec(d, hidden=hidden), rng)
    if randomize:
        for _, t in p.items():
            t.data = rng.normal(size=t.shape)
    return p


def test_motion_vector_identity():
    mv = M.motion_vector(Pose.identity(), [0, 0], 0.0).data
    assert mv.tolist() == [1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0]


def test_motion_vector_translation_and_rotation():
    mv = M.motion_vector(Pose.translation(1, 2, 3), [0, 0], 0.0).data
    assert mv[9:12].tolist() == [1, 2, 3]
    assert mv[0:9].tolist() == np.eye(3).reshape(-1).tolist()
    rz = M.motion_vector(Pose.from_rt(rot_z(np.pi / 2), np.zeros(3)), [0.5, -1], 0.25).data
    assert np.allclose(rz[0:9], [0, -1, 0, 1, 0, 0, 0, 0, 1], atol=1e-15)
    assert rz[12:].tolist() == [0.5, -1, 0.25]


def test_mask_motion_zeroes_slots():
    mv = M.motion_vector(Pose.translation(1, 2, 3), [4, 5], 6.0)
    assert np.array_equal(M.mask_motion(mv, []).data, np.zeros(15))
    only_v = M.mask_motion(mv, ["velocity"]).data
    assert only_v[12:14].tolist() == [4, 5] and not only_v[:12].any() and only_v[14] == 0


def test_constant_network_gives_identity_affine():
    p = mln_params(randomize=False)
    mv = Tensor(np.random.default_rng(1).normal(size=(5, 15)))
    g, b = M.mln_affine_params(mv, p, "mln")
    assert np.array_equal(g.data, np.ones((5, 6)))
    assert np.array_equal(b.data, np.zeros((5, 6)))


def test_affine_params_row_determinism_and_width():
    p = mln_params()
    row = np.random.default_rng(2).normal(size=15)
    g, b = M.mln_affine_params(Tensor(np.stack([row, row])), p, "mln")
    assert np.array_equal(g.data[0], g.data[1]) and np.array_equal(b.data[0], b.data[1])
    with pytest.raises(ShapeError):
        M.mln_affine_params(Tensor(np.zeros((2, 14))), p, "mln")


def test_affine_params_gradient():
    p = mln_params(seed=3)
    mv = Tensor(np.random.default_rng(4).normal(size=(3, 15)))

    def f(*_):
        g, b = M.mln_affine_params(mv, p, "mln")
        return T.add(T.sum_(g), T.sum_(b))

    assert finite_diff_check(f, [p["mln.xi1.0.w"], p["mln.xi1.1.w"], p["mln.xi2.0.w"], p["mln.xi2.1.w"]]).passed


@given(st.integers(0, 2**16))
def test_mln_apply_identity_affine_is_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, pe = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    c, e = M.mln_apply(Tensor(x), Tensor(pe), Tensor(np.ones((4, 6))), Tensor(np.zeros((4, 6))))
    assert np.abs(c.data - T.layer_norm(Tensor(x)).data).max() < 1e-12
    assert np.abs(e.data - T.layer_norm(Tensor(pe)).data).max() < 1e-12


def test_mln_apply_zero_gamma():
    rng = np.random.default_rng(5)
    beta = rng.normal(size=(3, 6))
    c, e = M.mln_apply(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6))), Tensor(np.zeros((3, 6))),
                       Tensor(beta))
    assert np.array_equal(c.data, beta) and np.array_equal(e.data, beta)


def test_mln_apply_shape_error():
    z = Tensor(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        M.mln_apply(z, Tensor(np.zeros((2, 5))), z, z)


def test_motion_changes_output():
    p = mln_params(seed=6)
    x = np.random.default_rng(7).normal(size=(1, 6))
    mv = np.random.default_rng(8).normal(size=(2, 15))
    g, b = M.mln_affine_params(Tensor(mv), p, "mln")
    c, _ = M.mln_apply(Tensor(np.repeat(x, 2, axis=0)), Tensor(np.repeat(x, 2, axis=0)), g, b)
    assert not np.allclose(c.data[0], c.data[1])


def test_shared_modulation_bit_equal():
    # identical inputs on both streams must come out bit-equal, since one (gamma, beta) drives both
    p = mln_params(seed=9)
    x = Tensor(np.random.default_rng(10).normal(size=(3, 6)))
    g, b = M.mln_affine_params(Tensor(np.random.default_rng(11).normal(size=(3, 15))), p, "mln")
    c, e = M.mln_apply(x, x, g, b)
    assert np.array_equal(c.data, e.data)


def test_all_mln_params_receive_gradient():
    p = mln_params(seed=12)
    mv = Tensor(np.random.default_rng(13).normal(size=(4, 15)))
    x = Tensor(np.random.default_rng(14).normal(size=(4, 6)))
    leaves = p.tensors()
    for t in leaves:
        t.requires_grad = True
    with Tape() as tape:
        g, b = M.mln_affine_params(mv, p, "mln")
        c, e = M.mln_apply(x, x, g, b)
        loss = T.sum_(T.mul(T.add(c, e), Tensor(np.random.default_rng(15).normal(size=(4, 6)))))
    grads = backward(loss, tape, leaves)
    assert all(np.abs(grads[t]).sum() > 0 for t in leaves)


def test_linear_mode():
    p = mln_params(hidden=False, randomize=False)
    assert "mln.xi1.1.w" not in p
    g, b = M.mln_affine_params(Tensor(np.ones((2, 15))), p, "mln")
    assert np.array_equal(g.data, np.ones((2, 6)))


# -- position encoding -------------------------------------------------------------------

def pe_params(d=16, n_freq=4, seed=0):
    p = Params()
    M.add_position_encoder(p, "pe", d, n_freq, np.random.default_rng(seed))
    return p


def test_identical_points_identical_encodings():
    p = pe_params()
    pts = Tensor(np.array([[0.3, 0.4, 0.5], [0.3, 0.4, 0.5]]))
    out = M.position_encode(pts, p, "pe", 4).data
    assert np.array_equal(out[0], out[1])


def test_zero_psi_gives_zero_encoding():
    p = pe_params()
    for _, t in p.items():
        t.data = np.zeros_like(t.data)
    out = M.position_encode(Tensor(np.random.default_rng(1).uniform(size=(3, 3))), p, "pe", 4)
    assert np.array_equal(out.data, np.zeros((3, 16)))


def test_points_ten_metres_apart_are_distinguishable():
    lo, hi = (-16.0, -16.0, -2.0), (16.0, 16.0, 4.0)
    p = pe_params(d=64, n_freq=16, seed=2)
    pts = M.normalize_points(np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]), lo, hi)
    a, b = M.position_encode(Tensor(pts), p, "pe", 16).data
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < 0.99


def test_normalize_round_trip():
    lo, hi = (-16.0, -16.0, -2.0), (16.0, 16.0, 4.0)
    pts = np.random.default_rng(3).uniform(-16, 16, size=(5, 3))
    assert np.allclose(M.denormalize_points(M.normalize_points(pts, lo, hi), lo, hi), pts, atol=1e-12)
    assert np.array_equal(M.normalize_points(np.array([lo, hi]), lo, hi), [[0, 0, 0], [1, 1, 1]])


def test_position_encode_shape_error():
    with pytest.raises(ShapeError):
        M.position_encode(Tensor(np.zeros((2, 2))), pe_params(), "pe", 4)
