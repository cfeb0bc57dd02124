"""Multi-seed comparison of fusion variants on synthetic bright/dark scenes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen
from .datagen import SceneSpec
from .metrics import MetricsReport
from .model import NetworkConfig, build, param_count
from .train import TrainConfig, evaluate, train

# channel scale giving the three-branch model roughly the budget of a single-branch one at full width
PARITY_SCALE = {"tiny_csrnet": 0.65, "tiny_mcnn": 0.42}

# the shallow backbone trains from the small default init within a desk-sized step budget
BACKBONE = "tiny_mcnn"

DEFAULT_ARMS = {
    "iadm": dict(backbone=BACKBONE, variant="iadm", channel_scale=PARITY_SCALE[BACKBONE]),
    "unimodal_rgb": dict(backbone=BACKBONE, variant="unimodal(rgb)", channel_scale=1.0),
    "early_fusion": dict(backbone=BACKBONE, variant="early_fusion", channel_scale=1.0),
}


@dataclass
class ExperimentConfig:
    n_scenes: int = 200
    n_test: int = 40
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    steps: int = 2000
    lr: float = 1e-3
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(distractors=(1, 4)))
    arms: dict = field(default_factory=lambda: dict(DEFAULT_ARMS))


@dataclass
class ArmResult:
    arm: str
    seed: int
    params: int
    report: MetricsReport
    seconds: float


def split_scenes(scenes, n_test: int):
    """Tag ``n_test`` evenly spaced scenes as test so both illumination halves are represented."""
    idx = set(np.linspace(0, len(scenes) - 1, n_test).round().astype(int).tolist()) if n_test else set()
    return [replace(s, split="test" if i in idx else "train") for i, s in enumerate(scenes)]


def run_seed(cfg: ExperimentConfig, seed: int, log=None) -> dict[str, ArmResult]:
    scenes = split_scenes(datagen.make_scenes(cfg.n_scenes, cfg.scene, seed=1000 + seed), cfg.n_test)
    test = [s for s in scenes if s.split == "test"]
    out = {}
    for arm, kw in cfg.arms.items():
        t0 = time.perf_counter()
        net = NetworkConfig(seed=seed, **kw)
        tc = TrainConfig(net, epochs=10 ** 6, lr=cfg.lr, seed=seed, max_steps=cfg.steps, lr_decay="linear")
        rec = train(tc, scenes)
        rep = evaluate(rec.model, test)
        out[arm] = ArmResult(arm, seed, param_count(rec.model), rep, time.perf_counter() - t0)
        if log:
            log(f"seed {seed} {arm:<13} params {out[arm].params:>7} GAME0 {rep.game[0]:.3f} "
                f"dark {rep.per_illumination['dark'].game[0]:.3f} bright {rep.per_illumination['bright'].game[0]:.3f}"
                f" ({out[arm].seconds:.0f}s)")
    return out


def run(cfg: ExperimentConfig | None = None, log=None) -> list[dict[str, ArmResult]]:
    cfg = cfg or ExperimentConfig()
    return [run_seed(cfg, s, log) for s in cfg.seeds]


def budgets(cfg: ExperimentConfig | None = None) -> dict[str, int]:
    cfg = cfg or ExperimentConfig()
    return {arm: param_count(build(NetworkConfig(**kw))) for arm, kw in cfg.arms.items()}


def wins(results: list[dict[str, ArmResult]], arm: str, rival: str, level: int = 0) -> int:
    return sum(r[arm].report.game[level] < r[rival].report.game[level] for r in results)
