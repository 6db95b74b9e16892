"""Seeded synthetic multimodal event streams with irregular sampling, missing
modalities and missing labels.

Each case has a smooth latent path ``z(t)``; every observed modality emits
events at exponential inter-arrival times whose content is a fixed
modality-specific nonlinear read-out of ``z`` plus noise.

``separable``: ``y = 1[mean_t z_0(t) > 0]``, visible through either modality.

``coupled``: two hidden signs ``a`` and ``b`` switch on at a shared onset
time ``t*`` (a smooth step of width ``signal_width``), ``a`` only in modality 0
and ``b`` only in modality 1; ``y = 1[a * b > 0]``. Neither modality alone says
anything about ``y``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import ClinicalEvent, EventBatch, write_dataset

SPLITS = ("train", "val", "test")
TASKS = ("separable", "coupled")


@dataclass
class GenConfig:
    train_cases: int = 700
    val_cases: int = 150
    test_cases: int = 150
    num_modalities: int = 2
    feature_dims: tuple[int, ...] = (8, 8)
    horizon: float = 48.0
    event_rates: tuple[float, ...] = (0.5, 0.15)
    modality_missing_rate: float = 0.0
    label_missing_rate: float = 0.0
    task: str = "separable"
    noise: float = 0.1
    latent_dim: int = 3
    signal_width: float = 3.0
    signal_amp: float = 2.0
    background_scale: float = 0.5
    seed: int = 0
    label_missing_splits: tuple[str, ...] = ("train",)

    def __post_init__(self) -> None:
        for name in ("modality_missing_rate", "label_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "coupled" and self.num_modalities < 2:
            raise ValueError("the coupled task needs at least two modalities")
        self.feature_dims = tuple(int(v) for v in self.feature_dims)
        self.event_rates = tuple(float(v) for v in self.event_rates)
        if len(self.feature_dims) != self.num_modalities or len(self.event_rates) != self.num_modalities:
            raise ValueError("feature_dims and event_rates need one entry per modality")
        self.label_missing_splits = tuple(self.label_missing_splits)

    @classmethod
    def with_total(cls, cases: int, **kw) -> "GenConfig":
        """Split ``cases`` 70/15/15 into train/val/test."""
        val = int(round(cases * 0.15))
        return cls(train_cases=cases - 2 * val, val_cases=val, test_cases=val, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


@dataclass
class Readout:
    """Fixed modality-specific map from latent state to event content."""

    A: np.ndarray   # (k, f) nonlinear part
    C: np.ndarray   # (k, f) linear part


def readouts(cfg: GenConfig) -> list[Readout]:
    rng = np.random.default_rng([cfg.seed, 999])
    k = cfg.latent_dim + 1
    return [Readout(rng.normal(size=(k, f)) / np.sqrt(k), rng.normal(size=(k, f)) / np.sqrt(k))
            for f in cfg.feature_dims]


@dataclass
class LatentCase:
    label: int
    amp: np.ndarray
    freq: np.ndarray
    phase: np.ndarray
    offset: np.ndarray
    t_star: float = 0.0
    signs: tuple[float, float] = (0.0, 0.0)
    extras: dict = field(default_factory=dict)

    def path(self, t: np.ndarray) -> np.ndarray:
        """``(len(t), latent_dim)`` smooth background state."""
        return self.offset + self.amp * np.sin(np.outer(t, self.freq) + self.phase)


def _latent(cfg: GenConfig, rng: np.random.Generator) -> LatentCase:
    L = cfg.latent_dim
    amp = rng.uniform(0.3, 1.0, size=L)
    freq = rng.uniform(0.05, 0.4, size=L)
    phase = rng.uniform(0, 2 * np.pi, size=L)
    offset = rng.normal(0.0, 1.0, size=L)
    if cfg.task == "separable":
        case = LatentCase(0, amp, freq, phase, offset)
        grid = np.linspace(0.0, cfg.horizon, 97)
        case.label = int(case.path(grid)[:, 0].mean() > 0)
        return case
    a, b = rng.choice([-1.0, 1.0], size=2)
    t_star = float(rng.uniform(0.1 * cfg.horizon, 0.5 * cfg.horizon))
    return LatentCase(int(a * b > 0), amp, freq, phase, offset, t_star, (a, b))


def expected_content(cfg: GenConfig, case: LatentCase, m: int, t: np.ndarray, ro: Readout) -> np.ndarray:
    """Noise-free event content of modality ``m`` at times ``t``."""
    z = case.path(t)
    if cfg.task == "coupled":
        z = cfg.background_scale * z
        onset = 0.5 * (1.0 + np.tanh((t - case.t_star) / cfg.signal_width))
        sign = case.signs[0] if m == 0 else (case.signs[1] if m == 1 else 0.0)
        extra = cfg.signal_amp * sign * onset
    else:
        extra = np.zeros(len(t))
    s = np.concatenate([z, extra[:, None]], axis=1)
    return np.tanh(s @ ro.A) + s @ ro.C


def _content(cfg: GenConfig, case: LatentCase, m: int, t: np.ndarray, ro: Readout,
             rng: np.random.Generator) -> np.ndarray:
    x = expected_content(cfg, case, m, t, ro)
    return x + cfg.noise * rng.normal(size=x.shape)


def _times(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    out, t = [], rng.exponential(1.0 / rate)
    while t <= horizon:
        out.append(t)
        t += rng.exponential(1.0 / rate)
    if not out:
        out.append(rng.uniform(0.0, horizon))
    return np.round(np.array(out), 6)


def _observed_modalities(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    M = cfg.num_modalities
    mu = np.ones(M, dtype=bool)
    if M > 1 and rng.random() < cfg.modality_missing_rate:
        keep = rng.integers(1, M)            # 1..M-1 modalities stay
        mu[:] = False
        mu[rng.permutation(M)[:keep]] = True
    return mu


def generate_split(cfg: GenConfig, split: str) -> tuple[EventBatch, list[LatentCase]]:
    n = {"train": cfg.train_cases, "val": cfg.val_cases, "test": cfg.test_cases}[split]
    split_id = SPLITS.index(split)
    ros = readouts(cfg)
    events: list[ClinicalEvent] = []
    labels: dict[int, tuple[int, bool]] = {}
    latents = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, split_id, i])
        case = _latent(cfg, rng)
        mu = _observed_modalities(cfg, rng)
        label_seen = not (split in cfg.label_missing_splits and rng.random() < cfg.label_missing_rate)
        case_id = split_id * 1_000_000 + i
        for m in range(cfg.num_modalities):
            if not mu[m]:
                continue
            t = _times(cfg.event_rates[m], cfg.horizon, rng)
            x = _content(cfg, case, m, t, ros[m], rng)
            events.extend(ClinicalEvent(x[k], float(t[k]), m, case_id) for k in range(len(t)))
        labels[case_id] = (case.label, label_seen)
        case.extras["observed"] = mu
        latents.append(case)
    batch = EventBatch.from_events(events, labels, cfg.num_modalities, cfg.horizon,
                                   feature_dims=cfg.feature_dims)
    return batch, latents


def generate(cfg: GenConfig) -> dict[str, EventBatch]:
    return {s: generate_split(cfg, s)[0] for s in SPLITS}


def coupled_task(cfg: GenConfig) -> dict[str, EventBatch]:
    if cfg.task != "coupled":
        cfg = GenConfig(**{**cfg.__dict__, "task": "coupled"})
    return generate(cfg)


def write_splits(cfg: GenConfig, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, batch in generate(cfg).items():
        paths[split] = out_dir / f"{split}.jsonl"
        write_dataset(batch, paths[split])
    manifest = {"generator": cfg.to_dict(), "files": {s: p.name for s, p in paths.items()}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return paths
