import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from querystream.autodiff import tensor as T
from querystream.autodiff.nn import Params, add_attention, add_mlp, mlp_forward, mlp_layers
from querystream.autodiff.tensor import Tensor
from querystream.engine import QuerySet, StreamEngine, cross_attention_layer
from querystream.errors import ConfigError, ShapeError
from querystream.geometry import Pose
from querystream.paradigms import (CSV_FIELDS, BenchConfig, BevGrid, Mixer, TokenHistory, bev_fuse_concat,
                                   bev_fuse_recurrent, bev_state_bytes, bev_warp, benchmark, object_state_bytes,
                                   perspective_contributions, perspective_state_bytes, perspective_temporal,
                                   memory_latencies, position_latencies, write_csv)
from querystream.selfcheck import _tiny_decoder


# -- BEV warp -----------------------------------------------------------------------------

def test_identity_warp_is_exact():
    g = BevGrid(np.random.default_rng(0).normal(size=(3, 8, 10)))
    assert np.abs(bev_warp(g, Pose.identity()).data - g.data).max() < 1e-12


def test_one_cell_shift():
    data = np.random.default_rng(1).normal(size=(2, 6, 7))
    # ego moved one cell forward: old x maps to new x - 1
    out = bev_warp(BevGrid(data), Pose.translation(-1.0, 0.0, 0.0)).data
    assert np.abs(out[:, :, :-1] - data[:, :, 1:]).max() < 1e-12
    assert np.array_equal(out[:, :, -1], np.zeros((2, 6)))
    up = bev_warp(BevGrid(data), Pose.translation(0.0, 1.0, 0.0)).data
    assert np.abs(up[:, 1:, :] - data[:, :-1, :]).max() < 1e-12
    assert np.array_equal(up[:, 0, :], np.zeros((2, 7)))


@settings(max_examples=30)
@given(st.floats(-0.2, 0.2), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_warp_round_trip_on_smooth_grid(yaw, tx, ty):
    g = BevGrid(np.zeros((1, 40, 40)))
    x, y = g.cell_centers()
    g = BevGrid(np.sin(x / 6.0)[None] * np.cos(y / 5.0)[None] + 0.5)
    rel = Pose.from_yaw(yaw, x=tx, y=ty)
    back = bev_warp(bev_warp(g, rel), rel.inverse()).data
    inner = (slice(None), slice(8, -8), slice(8, -8))
    err = np.abs(back[inner] - g.data[inner]).max() / np.abs(g.data).max()
    assert err < 0.05


def test_grid_validation():
    with pytest.raises(ShapeError):
        BevGrid(np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        BevGrid(np.zeros((1, 2, 2)), cell=0.0)


# -- BEV fusion ---------------------------------------------------------------------------

def hand_mix(weight, bias, grids):
    c_out = weight.shape[0]
    stacked = [ch for g in grids for ch in g]
    _, h, w = grids[0].shape
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = bias[o] + sum(weight[o, c] * stacked[c][i, j] for c in range(len(stacked)))
    return out


def test_concat_k2_hand_mix():
    rng = np.random.default_rng(2)
    cur, h1, h2 = (rng.normal(size=(2, 3, 3)) for _ in range(3))
    mixer = Mixer(rng.normal(size=(2, 6)), rng.normal(size=2))
    out = bev_fuse_concat([BevGrid(h1), BevGrid(h2)], BevGrid(cur), mixer).data
    assert np.abs(out - hand_mix(mixer.weight, mixer.bias, [cur, h1, h2])).max() < 1e-12


def test_concat_k0_and_zero_history():
    rng = np.random.default_rng(3)
    cur = rng.normal(size=(2, 4, 4))
    m1 = Mixer(rng.normal(size=(2, 2)), rng.normal(size=2))
    assert np.abs(bev_fuse_concat([], BevGrid(cur), m1).data - hand_mix(m1.weight, m1.bias, [cur])).max() < 1e-12
    m3 = Mixer(rng.normal(size=(2, 6)), rng.normal(size=2))
    zeros = [BevGrid(np.zeros_like(cur))] * 2
    m_cur = Mixer(m3.weight[:, :2], m3.bias)
    assert np.abs(bev_fuse_concat(zeros, BevGrid(cur), m3).data - bev_fuse_concat([], BevGrid(cur), m_cur).data
                  ).max() < 1e-12


def test_recurrent_hand_mix_and_constant_state():
    rng = np.random.default_rng(4)
    cur, hid = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    mixer = Mixer(rng.normal(size=(2, 4)), rng.normal(size=2))
    out = bev_fuse_recurrent(BevGrid(hid), BevGrid(cur), mixer).data
    assert np.abs(out - hand_mix(mixer.weight, mixer.bias, [cur, hid])).max() < 1e-12
    zero = bev_fuse_recurrent(BevGrid(np.zeros_like(hid)), BevGrid(cur), mixer).data
    assert np.abs(zero - hand_mix(mixer.weight[:, :2], mixer.bias, [cur])).max() < 1e-12
    state = BevGrid(hid)
    sizes = []
    for _ in range(10):
        state = bev_fuse_recurrent(state, BevGrid(rng.normal(size=(2, 3, 3))), mixer)
        sizes.append(state.nbytes)
    assert len(set(sizes)) == 1


def test_fusion_shape_errors():
    mixer = Mixer(np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ShapeError):
        bev_fuse_concat([BevGrid(np.zeros((2, 3, 4)))], BevGrid(np.zeros((2, 3, 3))), mixer)
    with pytest.raises(ShapeError):
        bev_fuse_concat([], BevGrid(np.zeros((2, 3, 3))), mixer)


# -- perspective temporal -----------------------------------------------------------------

def persp_setup(seed, n_q=5, n_tok=7):
    cfg = _tiny_decoder(seed)
    rng = np.random.default_rng(seed)
    p = Params()
    add_attention(p, "a", cfg.d, rng)
    add_mlp(p, "f", [cfg.d, cfg.ffn_dim, cfg.d], rng)
    qs = QuerySet(Tensor(rng.normal(size=(n_q, cfg.d))), Tensor(rng.normal(size=(n_q, cfg.d))),
                  Tensor(rng.uniform(size=(n_q, 3))))
    frame = lambda: (Tensor(rng.normal(size=(n_tok, cfg.d))), Tensor(rng.normal(size=(n_tok, cfg.d))))
    return cfg, p, qs, frame


def test_k0_equals_cross_attention_layer():
    cfg, p, qs, frame = persp_setup(0)
    tok, pe = frame()
    got = perspective_temporal(qs, TokenHistory(0), tok, pe, p, "a", "f", cfg.heads)
    ref = cross_attention_layer(qs, tok, pe, p, "a", "f", cfg.heads)
    assert np.array_equal(got.data, ref.data)


def test_k1_duplicate_history_doubles_contribution():
    cfg, p, qs, frame = persp_setup(1)
    tok, pe = frame()
    hist = TokenHistory(1)
    hist.push(tok, pe)
    parts = perspective_contributions(qs, hist, tok, pe, p, "a", cfg.heads)
    single = perspective_contributions(qs, TokenHistory(0), tok, pe, p, "a", cfg.heads)[0]
    assert np.abs(T.add(parts[0], parts[1]).data - 2 * single.data).max() < 1e-12


@settings(max_examples=20)
@given(st.integers(0, 2**16), st.integers(0, 4))
def test_additivity(seed, k):
    cfg, p, qs, frame = persp_setup(seed % 50)
    hist = TokenHistory(k)
    for _ in range(k):
        hist.push(*frame())
    tok, pe = frame()
    parts = perspective_contributions(qs, hist, tok, pe, p, "a", cfg.heads)
    assert len(parts) == k + 1
    x = T.layer_norm(Tensor(qs.q_c.data + sum(part.data for part in parts)))
    want = T.layer_norm(T.add(x, mlp_forward(x, mlp_layers(p, "f"), "relu")))
    got = perspective_temporal(qs, hist, tok, pe, p, "a", "f", cfg.heads)
    assert np.abs(got.data - want.data).max() < 1e-10


def test_history_must_be_full():
    cfg, p, qs, frame = persp_setup(2)
    with pytest.raises(ShapeError):
        perspective_temporal(qs, TokenHistory(2), *frame(), p, "a", "f", cfg.heads)


def test_token_history_ring():
    h = TokenHistory(2)
    frames = [(Tensor(np.full((3, 2), i)), Tensor(np.zeros((3, 2)))) for i in range(4)]
    for f in frames:
        h.push(*f)
    assert len(h) == 2 and [t.data[0, 0] for t, _ in h.frames] == [2.0, 3.0]
    assert h.nbytes == 2 * 2 * 6 * 8


# -- state sizes and benchmark ------------------------------------------------------------

def test_state_bytes():
    cfg = _tiny_decoder(0)
    assert object_state_bytes(cfg) == (cfg.memory_frames * cfg.records_per_frame + cfg.n_prop) * (cfg.d + 22) * 8
    assert [bev_state_bytes(16, 32, k) for k in (1, 2, 4)] == [16 * 32 * 32 * 8 * k for k in (1, 2, 4)]
    assert perspective_state_bytes(cfg, 4, 100) == 4 * perspective_state_bytes(cfg, 1, 100)


def test_benchmark_schema(tmp_path):
    cfg = BenchConfig(n_tokens=20, bev_size=8, bev_channels=2, trials=2, warmup=1, decoder=_tiny_decoder(0))
    rows = benchmark(("object_centric", "perspective", "bev_concat", "bev_recurrent"), (1, 4), cfg)
    assert [(r["method"], r["history"]) for r in rows] == [(m, k) for m in ("object_centric", "perspective",
                                                                            "bev_concat", "bev_recurrent")
                                                         for k in (1, 4)]
    assert all(r["latency_us_median"] > 0 and r["latency_us_p90"] >= r["latency_us_median"] for r in rows)
    bev = {(r["method"], r["history"]): r["state_bytes"] for r in rows}
    assert bev[("bev_concat", 4)] == 4 * bev[("bev_concat", 1)]
    assert bev[("bev_recurrent", 4)] == bev[("bev_recurrent", 1)]
    write_csv(tmp_path / "b.csv", rows)
    with open(tmp_path / "b.csv") as fh:
        read = list(csv.DictReader(fh))
    assert tuple(read[0]) == CSV_FIELDS and len(read) == len(rows)
    again = benchmark(("object_centric", "perspective", "bev_concat", "bev_recurrent"), (1, 4), cfg)
    assert [(r["method"], r["history"], r["state_bytes"]) for r in again] == \
        [(r["method"], r["history"], r["state_bytes"]) for r in rows]
    with pytest.raises(ConfigError):
        benchmark(("voxels",), (1,), cfg)


def test_position_latencies_shape():
    eng = StreamEngine(_tiny_decoder(0))
    t = position_latencies(eng, (3, 1, 3), 4, 10)
    assert sorted(t) == [1, 3] and all(v.shape == (4,) and (v > 0).all() for v in t.values())
    assert eng.state_records() == 0


def test_memory_latencies_shape():
    cfg = BenchConfig(n_tokens=10, warmup=1, decoder=_tiny_decoder(0))
    t = memory_latencies(cfg, (2, 1, 2), 3)
    assert sorted(t) == [1, 2] and all(v.shape == (3,) and (v > 0).all() for v in t.values())
