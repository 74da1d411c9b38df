"""Occlusion benchmark: shared single-frame pretraining, then per-arm streaming fine-tunes.

Every arm of one seed starts from the same pretrained detector and sees the
same scenes and the same number of updates; only the arm's own setting
(training length, memory length, motion inputs) differs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from querystream.engine import DecoderConfig, StreamEngine
from querystream.sim import SceneConfig, occluded_fraction, simulate
from querystream.train import TrainConfig, evaluate_engine, train_streaming

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    seq_len: int = 8
    overrides: dict = field(default_factory=dict)  # DecoderConfig fields

    def decoder(self, base: DecoderConfig) -> DecoderConfig:
        ov = dict(self.overrides)
        if "mln_inputs" in ov:
            ov["mln_inputs"] = tuple(ov["mln_inputs"])
        return replace(base, **ov)


FRAME_ARMS = tuple(Arm(f"frames{t}", t) for t in (1, 2, 4, 8))
MLN_ARMS = (Arm("frames8", 8), Arm("no_motion", 8, {"mln_inputs": []}))
MEMORY_ARMS = (Arm("memory1", 8, {"memory_frames": 1}), Arm("memory2", 8, {"memory_frames": 2}),
               Arm("frames8", 8))


@dataclass(frozen=True)
class BenchmarkConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    train_scenes: int = 32
    test_scenes: int = 4
    pretrain_updates: int = 6000
    finetune_updates: int = 500
    finetune_warmup: int = 10
    scene: SceneConfig = field(default_factory=SceneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def key(self) -> str:
        d = asdict(self)
        d.pop("seeds")
        d["scene"] = self.scene.to_dict()
        return json.dumps(d, sort_keys=True, default=str)


@dataclass
class Scenes:
    clean: list
    occluded: list
    test: list

    @property
    def occluded_fraction(self) -> float:
        return float(np.mean([occluded_fraction(f) for f, _ in self.test]))


def benchmark_scenes(seed: int, cfg: BenchmarkConfig) -> Scenes:
    """Disjoint scene seeds for pretraining, fine-tuning and testing."""
    base = 1000 * seed
    clean_cfg = replace(cfg.scene, occlusion_prob=0.0)
    clean = [simulate(replace(clean_cfg, seed=base + i)) for i in range(cfg.train_scenes)]
    occ = [simulate(replace(cfg.scene, seed=base + 500 + i)) for i in range(cfg.train_scenes)]
    test = [simulate(replace(cfg.scene, seed=base + 900 + i)) for i in range(cfg.test_scenes)]
    return Scenes(clean, occ, test)


class Benchmark:
    """Runs arms per seed, caching pretrained weights and per-arm metrics on disk."""

    def __init__(self, cfg: BenchmarkConfig = BenchmarkConfig(), cache_dir: str | Path | None = None):
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._scenes: dict[int, Scenes] = {}
        self._results: dict[tuple[int, str], dict] = {}
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            stamp = self.cache_dir / "benchmark.json"
            if stamp.exists() and stamp.read_text() != cfg.key():
                for f in self.cache_dir.glob("*.json"):
                    f.unlink()
            stamp.write_text(cfg.key())

    def scenes(self, seed: int) -> Scenes:
        if seed not in self._scenes:
            self._scenes[seed] = benchmark_scenes(seed, self.cfg)
        return self._scenes[seed]

    def _path(self, name: str) -> Path | None:
        return None if self.cache_dir is None else self.cache_dir / name

    def pretrained(self, seed: int) -> StreamEngine:
        path = self._path(f"base_seed{seed}.json")
        if path is not None and path.exists():
            return StreamEngine.load(path, with_state=False)
        eng = StreamEngine(replace(self.cfg.decoder, seed=seed))
        log.info("pretraining seed %d for %d updates", seed, self.cfg.pretrain_updates)
        train_streaming(eng, self.scenes(seed).clean, TrainConfig.for_length(1, updates=self.cfg.pretrain_updates,
                                                                             seed=seed))
        if path is not None:
            eng.save(path, include_state=False)
        return eng

    def run(self, seed: int, arm: Arm) -> dict:
        """Metrics dict ``{split: {"mAP", "mATE", "mAVE"}}`` of one fine-tuned arm."""
        key = (seed, arm.name)
        if key in self._results:
            return self._results[key]
        path = self._path(f"arm_{arm.name}_seed{seed}.json")
        if path is not None and path.exists():
            self._results[key] = json.loads(path.read_text())
            return self._results[key]
        base = self.pretrained(seed)
        eng = StreamEngine(arm.decoder(base.cfg), base.params)
        sc = self.scenes(seed)
        tcfg = TrainConfig.for_length(arm.seq_len, updates=self.cfg.finetune_updates, seed=seed,
                                      warmup=self.cfg.finetune_warmup)
        log.info("fine-tuning %s seed %d", arm.name, seed)
        train_streaming(eng, sc.occluded, tcfg)
        reports = evaluate_engine(eng, sc.test, memoryless=arm.seq_len == 1)
        out = {s: {"mAP": r.mAP, "mATE": r.mATE, "mAVE": r.mAVE} for s, r in reports.items()}
        self._results[key] = out
        if path is not None:
            path.write_text(json.dumps(out, indent=2))
        return out

    def table(self, arms: Sequence[Arm], split: str = "all") -> dict[str, list[float]]:
        """Per-arm mAP across seeds."""
        return {a.name: [self.run(s, a)[split]["mAP"] for s in self.cfg.seeds] for a in arms}
