"""Fast invariant suites: geometry, motion compensation, gauge, gradients,
matching, memory semantics and cold start.

Each suite returns a :class:`SuiteResult`; :func:`run_selfcheck` runs them all
and reports whether every one passed.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from querystream.autodiff import tensor as T
from querystream.autodiff.gradcheck import finite_diff_check
from querystream.autodiff.nn import AttentionParams, Params, add_attention, add_mlp, mlp_forward, mlp_layers, \
    multi_head_attention
from querystream.autodiff.tensor import Tensor, _result, no_tape
from querystream.engine import DecoderConfig, StreamEngine, detection_head, init_params, memoryless_decode
from querystream.geometry import (Pose, align_centers, linear_motion_compensate, random_pose, relative_ego_pose,
                                  rigid_inverse, transform_points)
from querystream.losses import LossWeights, Targets, detection_loss
from querystream.matching import brute_force_match, hungarian_match
from querystream.memory import MemoryQueue, select_block, topk_indices
from querystream import mln as M

TOL = 1e-9


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str
    seconds: float = 0.0


# -- 1-3: geometry -------------------------------------------------------------

def _random_rigid_stack(rng: np.random.Generator, n: int, scale: float = 50.0) -> np.ndarray:
    return np.stack([random_pose(rng, scale).matrix for _ in range(n)])


def check_alignment(n: int = 10_000, seed: int = 0) -> SuiteResult:
    """A static world point seen from the previous frame and aligned equals its current-frame view."""
    rng = np.random.default_rng(seed)
    e_prev = _random_rigid_stack(rng, n)
    e_cur = _random_rigid_stack(rng, n)
    p = rng.uniform(-100, 100, size=(n, 3))
    in_prev = transform_points(rigid_inverse(e_prev), p)
    rel = rigid_inverse(e_cur) @ e_prev
    err = np.abs(align_centers(in_prev, rel) - transform_points(rigid_inverse(e_cur), p)).max()
    return SuiteResult("alignment", bool(err < TOL), n, f"max err {err:.2e}")


def check_motion_compensation(n: int = 10_000, seed: int = 1) -> SuiteResult:
    """Constant-velocity objects land where the kinematic oracle puts them."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        e_prev, e_cur = random_pose(rng), random_pose(rng)
        x0 = rng.uniform(-50, 50, size=3)
        v = rng.uniform(-20, 20, size=2)
        dt = float(rng.uniform(0, 2))
        x1 = x0 + np.r_[v * dt, 0.0]
        got = linear_motion_compensate(e_prev.inverse().apply(x0), v, e_prev, e_cur, dt)
        worst = max(worst, float(np.abs(got - e_cur.inverse().apply(x1)).max()))
    return SuiteResult("motion_compensation", worst < TOL, n, f"max err {worst:.2e}")


def check_gauge(n: int = 1_000, seed: int = 2) -> SuiteResult:
    """Relative ego pose ignores a global rigid change of world coordinates."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        a, b, g = random_pose(rng), random_pose(rng), random_pose(rng)
        ref = relative_ego_pose(a, b).matrix
        moved = relative_ego_pose(g @ a, g @ b).matrix
        worst = max(worst, float(np.abs(ref - moved).max()))
    return SuiteResult("gauge_invariance", worst < TOL, n, f"max err {worst:.2e}")


# -- 4: gradients --------------------------------------------------------------

GradCase = tuple[Callable[..., Tensor], list[Tensor]]


def _projector(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=shape))
    return lambda y: T.sum_(T.mul(y, r))


def case_matmul(rng) -> GradCase:
    n, k, m = rng.integers(1, 5, size=3)
    proj = _projector(rng, (n, m))
    return (lambda a, b: proj(T.matmul(a, b))), [Tensor(rng.normal(size=(n, k))), Tensor(rng.normal(size=(k, m)))]


def case_layer_norm(rng) -> GradCase:
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    proj = _projector(rng, (n, d))
    return (lambda x: proj(T.layer_norm(x))), [Tensor(rng.normal(size=(n, d)) * rng.uniform(0.5, 3))]


def case_softmax(rng) -> GradCase:
    n, d = int(rng.integers(1, 4)), int(rng.integers(1, 7))
    proj = _projector(rng, (n, d))
    return (lambda x: proj(T.softmax_rows(x))), [Tensor(rng.normal(size=(n, d)) * 2)]


def case_mlp(rng) -> GradCase:
    dims = [int(x) for x in rng.integers(2, 5, size=3)]
    p = Params()
    add_mlp(p, "m", dims, rng)
    layers = mlp_layers(p, "m")
    n = int(rng.integers(1, 4))
    proj = _projector(rng, (n, dims[-1]))
    leaves = [Tensor(rng.normal(size=(n, dims[0])))] + [t for layer in layers for t in layer]
    act = "tanh" if rng.uniform() < 0.5 else "relu"
    return (lambda x, *_: proj(mlp_forward(x, layers, act))), leaves


def case_attention(rng) -> GradCase:
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 3))
    n_q, n_k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    p = Params()
    add_attention(p, "a", d, rng)
    ap = AttentionParams.from_params(p, "a")
    bias = rng.normal(size=(n_q, n_k)) if rng.uniform() < 0.5 else None
    proj = _projector(rng, (n_q, d))
    xs = [Tensor(rng.normal(size=(n_q, d))), Tensor(rng.normal(size=(n_k, d))), Tensor(rng.normal(size=(n_k, d)))]
    return (lambda q, k, v, *_: proj(multi_head_attention(q, k, v, heads, ap, bias))), xs + [ap.wq, ap.wk, ap.wo]


def case_mln(rng) -> GradCase:
    d, n = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    p = Params()
    M.add_mln_params(p, "mln", M.MlnSpec(d, hidden=True), rng)
    for name, t in p.items():
        t.data = rng.normal(size=t.shape) * 0.5
    mv = Tensor(rng.normal(size=(n, M.MOTION_DIM)))
    pc, pp = _projector(rng, (n, d)), _projector(rng, (n, d))

    def f(mv, q_c, pe, *_):
        g, b = M.mln_affine_params(mv, p, "mln")
        c, e = M.mln_apply(q_c, pe, g, b)
        return T.add(pc(c), pp(e))

    return f, [mv, Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d))),
               p["mln.xi1.0.w"], p["mln.xi2.1.w"]]


def _tiny_decoder(seed: int) -> DecoderConfig:
    return DecoderConfig(d=8, heads=2, layers=1, n_random=4, n_prop=2, memory_frames=2, records_per_frame=3,
                         token_dim=4, ffn_dim=8, n_freq=2, seed=seed)


def case_head(rng) -> GradCase:
    cfg = _tiny_decoder(int(rng.integers(1 << 30)))
    p = init_params(cfg)
    n = int(rng.integers(1, 4))
    pl, pr = _projector(rng, (n, cfg.n_classes)), _projector(rng, (n, 10))

    def f(q_c, q_pe, *_):
        logits, reg = detection_head(q_c, q_pe, p)
        return T.add(pl(logits), pr(reg))

    return f, [Tensor(rng.normal(size=(n, cfg.d))), Tensor(rng.normal(size=(n, cfg.d))),
               p["head.cls.1.w"], p["head.reg.0.w"]]


def case_detection_loss(rng) -> GradCase:
    n_pred, n_gt = 3, int(rng.integers(0, 3))
    anchors = Tensor(rng.uniform(0, 1, size=(n_pred, 3)))
    tgt = Targets(rng.uniform(0, 1, size=(n_gt, 3)), rng.integers(0, 3, size=n_gt),
                  rng.normal(size=(n_gt, 3)) * 0.3, rng.normal(size=(n_gt, 2)), rng.normal(size=(n_gt, 2)))
    w = LossWeights()
    xs = [Tensor(rng.normal(size=(n_pred, 3))), Tensor(rng.normal(size=(n_pred, 10)))]
    # the assignment is piecewise constant; freeze it so finite differences never straddle a flip
    match = detection_loss(*xs, anchors, tgt, w)[1]
    return (lambda logits, reg: detection_loss(logits, reg, anchors, tgt, w, match)[0]), xs


def _wrong_square(a: Tensor) -> Tensor:
    """Deliberately broken op: forward is x^2, backward claims 3x."""
    return _result(a.data * a.data, (a,), lambda g: (g * 3.0 * a.data,))


def case_corrupted(rng) -> GradCase:
    return (lambda x: T.sum_(_wrong_square(x))), [Tensor(rng.normal(size=(2, 3)) + 2.0)]


GRAD_CASES: dict[str, Callable[[np.random.Generator], GradCase]] = {
    "matmul": case_matmul,
    "layer_norm": case_layer_norm,
    "softmax": case_softmax,
    "mlp": case_mlp,
    "attention": case_attention,
    "mln": case_mln,
    "head": case_head,
    "detection_loss": case_detection_loss,
}


def check_gradients(instances: int = 100, seed: int = 3, inject_fault: bool = False,
                    tol: float = 1e-4) -> SuiteResult:
    cases = dict(GRAD_CASES)
    if inject_fault:
        cases["corrupted"] = case_corrupted
    failures, total, worst = [], 0, 0.0
    for name, make in cases.items():
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(name)] + [ord(c) for c in name]))
        for i in range(instances):
            f, xs = make(rng)
            rep = finite_diff_check(f, xs, tol=tol)
            total += 1
            worst = max(worst, rep.max_rel_err if not rep.passed else 0.0)
            if not rep.passed:
                failures.append(f"{name}#{i}")
    detail = f"{len(cases)} ops x {instances}" + (f"; failing {failures[:5]}" if failures else "")
    return SuiteResult("gradients", not failures, total, detail)


# -- 5: matching -----------------------------------------------------------------

def check_hungarian(n: int = 1_000, seed: int = 4) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        r, c = rng.integers(1, 8, size=2)
        cost = rng.uniform(0, 10, size=(r, c))
        got = hungarian_match(cost)
        ref = brute_force_match(cost)
        rows = {p for p, _ in got.pairs}
        cols = {g for _, g in got.pairs}
        if len(rows) != len(got.pairs) or len(cols) != len(got.pairs) or len(got.pairs) != min(r, c):
            return SuiteResult("hungarian", False, n, f"invalid assignment for {r}x{c}")
        worst = max(worst, abs(got.total_cost - ref.total_cost))
    return SuiteResult("hungarian", worst < 1e-9, n, f"max cost gap {worst:.2e}")


# -- 6: memory -------------------------------------------------------------------

def _block(rng, k: int, d: int, t: float):
    scores = rng.uniform(size=k)
    return select_block(Tensor(rng.normal(size=(k, d))), rng.normal(size=(k, 3)), rng.normal(size=(k, 2)),
                        Pose.from_yaw(t, x=t), t, scores, k)


def random_stream(cfg: DecoderConfig, n_frames: int, n_tokens: int, seed: int):
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(cfg.bounds_lo), np.asarray(cfg.bounds_hi)
    return [(rng.normal(size=(n_tokens, cfg.token_dim)), rng.uniform(lo, hi, size=(n_tokens, 3)),
             Pose.from_yaw(0.05 * i, x=0.8 * i, y=0.1 * i), 0.5 * i) for i in range(n_frames)]


def resume_matches(cfg: DecoderConfig, n_frames: int = 6, split: int = 3, seed: int = 0) -> bool:
    """Stream with a checkpoint round trip at ``split`` equals an uninterrupted stream bit for bit."""
    frames = random_stream(cfg, n_frames, 12, seed)
    with no_tape():
        a = StreamEngine(cfg)
        ref = [a.step(*f) for f in frames]
        b = StreamEngine(cfg)
        for f in frames[:split]:
            b.step(*f)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ck.json"
            b.save(path)
            c = StreamEngine.load(path)
        rest = [c.step(*f) for f in frames[split:]]
    return all(np.array_equal(x.logits.data, y.logits.data) and np.array_equal(x.reg.data, y.reg.data)
               for x, y in zip(ref[split:], rest))


def check_memory(seed: int = 5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    problems = []
    q = MemoryQueue(3, 4)
    pushed = []
    for i in range(7):
        b = _block(rng, 4, 5, float(i))
        q.push_frame(b)
        pushed.append(b)
        if len(q) != min(i + 1, 3):
            problems.append("capacity")
    if [b.timestamp for b in q.blocks] != [4.0, 5.0, 6.0]:
        problems.append("fifo order")
    view = q.gather(7.5)
    if not np.array_equal(view.dt, 7.5 - np.repeat([4.0, 5.0, 6.0], 4)):
        problems.append("dt arithmetic")
    if list(topk_indices([0.5, 0.9, 0.5, 0.9, 0.1], 3)) != [1, 3, 0]:
        problems.append("stable ties")
    full = DecoderConfig.full_size()
    if full.n_random + full.n_prop != 900 or full.hybrid_keys != 1924:
        problems.append(f"full-size key count {full.hybrid_keys}")
    if not resume_matches(_tiny_decoder(seed)):
        problems.append("checkpoint resume")
    return SuiteResult("memory_queue", not problems, 6, "ok" if not problems else ", ".join(problems))


# -- 7: cold start ---------------------------------------------------------------

def check_cold_start(trials: int = 5, seed: int = 6) -> SuiteResult:
    bad = 0
    for i in range(trials):
        cfg = _tiny_decoder(seed + i)
        eng = StreamEngine(cfg)
        tok, pts, pose, t = random_stream(cfg, 1, 10, seed + i)[0]
        with no_tape():
            out = eng.step(tok, pts, pose, t)
            logits, reg = memoryless_decode(cfg, eng.params, tok, pts)
        rows = slice(0, cfg.n_random)
        if not (np.array_equal(out.logits.data[rows], logits.data) and np.array_equal(out.reg.data[rows], reg.data)):
            bad += 1
    return SuiteResult("cold_start", bad == 0, trials, f"{bad} mismatches")


SUITES: tuple[tuple[str, Callable[..., SuiteResult]], ...] = (
    ("alignment", check_alignment),
    ("motion_compensation", check_motion_compensation),
    ("gauge_invariance", check_gauge),
    ("gradients", check_gradients),
    ("hungarian", check_hungarian),
    ("memory_queue", check_memory),
    ("cold_start", check_cold_start),
)


def run_selfcheck(inject_fault: bool = False) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES:
        t0 = time.perf_counter()
        res = fn(inject_fault=inject_fault) if name == "gradients" else fn()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def format_table(results: list[SuiteResult]) -> str:
    lines = [f"{'suite':<22}{'cases':>7}  {'result':<6}{'secs':>7}  detail"]
    for r in results:
        lines.append(f"{r.name:<22}{r.cases:>7}  {'pass' if r.passed else 'FAIL':<6}{r.seconds:>7.2f}  {r.detail}")
    return "\n".join(lines)
