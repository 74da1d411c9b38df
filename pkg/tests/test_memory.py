import numpy as np
import pytest
from hypothesis import given, strategies as st

from querystream.autodiff.tensor import Tensor
from querystream.engine import DecoderConfig
from querystream.errors import ConfigError, OrderingError, ShapeError
from querystream.geometry import Pose
from querystream.memory import MemoryQueue, QueryRecord, select_block, select_topk, should_save, topk_indices
from querystream.selfcheck import _tiny_decoder, check_memory, resume_matches


def record(score, d=4, t=0.0, q=None):
    return QueryRecord(np.full(d, q if q is not None else score), np.array([score, 0, 0]), np.zeros(2),
                       Pose.identity(), t, score)


def block(t, k=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return select_block(Tensor(rng.normal(size=(k, d))), rng.normal(size=(k, 3)), rng.normal(size=(k, 2)),
                        Pose.translation(t, 0, 0), t, rng.uniform(size=k), k)


def test_topk_examples():
    b = select_topk([(record(0.9), 0.9), (record(0.1), 0.1), (record(0.5), 0.5)], 2)
    assert b.scores.tolist() == [0.9, 0.5]
    assert b.q_p[:, 0].tolist() == [0.9, 0.5]
    assert list(topk_indices([0.5, 0.5, 0.5], 2)) == [0, 1]


def test_topk_padding():
    b = select_topk([(record(0.7), 0.7)], 3)
    assert len(b) == 3
    assert b.padded.tolist() == [False, True, True]
    assert np.array_equal(b.q_c.data[1:], np.zeros((2, 4)))
    assert np.array_equal(b.q_p[1:], np.zeros((2, 3)))
    assert b.scores[1:].tolist() == [0.0, 0.0]


def test_topk_config_error():
    with pytest.raises(ConfigError):
        topk_indices([1.0], 0)
    with pytest.raises(ConfigError):
        select_topk([(record(0.5), 0.5)], 0)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 30))
def test_topk_is_stable_partial_sort(scores, k):
    idx = topk_indices(scores, k)
    s = np.array(scores)
    assert sorted(s[idx].tolist(), reverse=True) == sorted(scores, reverse=True)[:k]
    # ties keep lower index first
    for a, b in zip(idx, idx[1:]):
        assert s[a] > s[b] or (s[a] == s[b] and a < b)


def test_push_fifo():
    q = MemoryQueue(4, 3)
    for t in range(1, 6):
        q.push_frame(block(float(t)))
    assert [b.timestamp for b in q.blocks] == [2.0, 3.0, 4.0, 5.0]
    one = MemoryQueue(4, 3)
    one.push_frame(block(1.0))
    assert len(one) == 1


def test_full_size_queue_holds_1024_records():
    q = MemoryQueue(4, 256)
    for t in range(6):
        q.push_frame(block(float(t), k=256, d=2, seed=t))
    assert q.n_records == 1024
    assert len(q.gather(10.0)) == 1024


@given(st.integers(1, 6), st.integers(1, 15))
def test_fifo_holds_last_n(n, m):
    q = MemoryQueue(n, 2)
    for t in range(m):
        q.push_frame(block(float(t), k=2))
        assert len(q) <= n
    assert [b.timestamp for b in q.blocks] == [float(t) for t in range(m)][-n:]
    assert len(q.gather(float(m))) == min(n, m) * 2


def test_push_errors():
    q = MemoryQueue(2, 3)
    q.push_frame(block(1.0))
    with pytest.raises(OrderingError):
        q.push_frame(block(1.0))
    with pytest.raises(ShapeError):
        q.push_frame(block(2.0, k=2))
    with pytest.raises(ConfigError):
        MemoryQueue(0, 3)


def test_gather_examples():
    q = MemoryQueue(4, 3)
    empty = q.gather(0.0, d=4)
    assert len(empty) == 0 and empty.q_c.shape == (0, 4) and empty.dt.shape == (0,)
    q.push_frame(block(1.0))
    assert np.array_equal(q.gather(1.5).dt, np.full(3, 0.5))
    q.push_frame(block(1.5, seed=1))
    view = q.gather(2.0)
    assert view.dt.tolist() == [1.0] * 3 + [0.5] * 3
    assert np.array_equal(view.q_c.data[:3], q.blocks[0].q_c.data)
    with pytest.raises(OrderingError):
        q.gather(1.0)


def test_should_save():
    assert all(should_save(i, 1) for i in range(10))
    assert [i for i in range(10) if should_save(i, 5)] == [0, 5]
    with pytest.raises(ConfigError):
        should_save(0, 0)


def test_snapshot_round_trip_bit_exact():
    q = MemoryQueue(3, 3, 2)
    for t in range(4):
        q.push_frame(block(float(t), seed=t))
    back = MemoryQueue.from_snapshot(q.snapshot())
    assert (back.capacity_frames, back.records_per_frame, back.save_interval) == (3, 3, 2)
    for a, b in zip(q.blocks, back.blocks):
        assert a.q_c.data.tobytes() == b.q_c.data.tobytes()
        for f in ("q_p", "v", "e", "times", "scores", "padded"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
        assert a.timestamp == b.timestamp


def test_record_validation():
    with pytest.raises(ValueError):
        QueryRecord(np.zeros(2), np.zeros(3), np.zeros(2), Pose.identity(), 0.0, 1.5)
    with pytest.raises(ValueError):
        QueryRecord(np.zeros(2), np.zeros(3), np.zeros(2), Pose.identity(), float("nan"), 0.5)


def test_full_size_key_count():
    cfg = DecoderConfig.full_size()
    assert (cfg.n_random, cfg.n_prop, cfg.memory_frames, cfg.records_per_frame) == (644, 256, 4, 256)
    assert cfg.hybrid_keys == 900 + 4 * 256 == 1924


@given(st.integers(1, 6), st.integers(0, 2**16))
def test_engine_resume_bit_exact(split, seed):
    assert resume_matches(_tiny_decoder(seed % 97), n_frames=7, split=split, seed=seed)


def test_memory_suite():
    assert check_memory().passed
