"""Training loop, evaluation and checkpoint round-trips."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .hierarchy import HierarchyModel, LayerOutputs, ModelConfig
from .numcore import AdamWState, Tape, Tensor, adamw_step, config_hash, load_checkpoint, save_checkpoint
from .objectives import metrics, predict, supervised_losses, total_loss
from .pointcloud import EventBatch
from .selfsup import FgaConfig, fga_loss, fgr_loss

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_g", "L_f", "L_s", "L_a", "L_r", "L_total")


@dataclass
class TrainingConfig:
    lambda_a: float = 0.002
    lambda_r: float = 10.0
    lr: float = 8e-4
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    eval_batch_size: int = 32
    seed: int = 0
    d: int = 32
    rank: int = 8
    heads: int = 8
    delta: float = 2.0
    k_max: int = 6
    fine_intervals: tuple[float, ...] | None = None
    coarse_intervals: tuple[float, ...] | None = None
    coupled: bool = True
    temperature: float = 0.1
    fga_excluded: tuple[int, ...] = ()
    recon_reduction: str = "relative"
    detach_target: bool = True
    normalize_losses: bool = True
    branch: str = "entropy"
    stop_at_auroc: float | None = None

    def __post_init__(self) -> None:
        if self.lambda_a < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be non-negative")
        for k in ("fine_intervals", "coarse_intervals", "fga_excluded"):
            v = getattr(self, k)
            if v is not None:
                setattr(self, k, tuple(v))

    def model_config(self, feature_dims) -> ModelConfig:
        return ModelConfig(feature_dims=tuple(feature_dims), d=self.d, rank=self.rank, heads=self.heads,
                           delta=self.delta, k_max=self.k_max, fine_intervals=self.fine_intervals,
                           coarse_intervals=self.coarse_intervals, coupled=self.coupled,
                           init_seed=self.seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class LossTerms:
    L_g: Tensor
    L_f: Tensor
    L_s: Tensor
    L_a: Tensor
    L_r: Tensor
    L_total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in LOSS_KEYS}


def compute_losses(outputs: LayerOutputs, batch: EventBatch, model: HierarchyModel,
                   cfg: TrainingConfig) -> LossTerms:
    L_g, L_f, L_s = supervised_losses(outputs, batch, model.heads, cfg.normalize_losses)
    L_a = fga_loss(outputs.h2, FgaConfig(cfg.temperature, cfg.fga_excluded))
    L_r = fgr_loss(outputs.recon, outputs.h4.tokens, outputs.h4.observed,
                   cfg.recon_reduction, cfg.detach_target)
    total = total_loss(L_g, L_f, L_s, L_a, L_r, cfg.lambda_a, cfg.lambda_r)
    return LossTerms(L_g, L_f, L_s, L_a, L_r, total)


def batch_loss(model: HierarchyModel, batch: EventBatch, cfg: TrainingConfig) -> LossTerms:
    return compute_losses(model(batch, "train"), batch, model, cfg)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_batch(model: HierarchyModel, batch: EventBatch, branch: str = "entropy",
                  batch_size: int = 32) -> np.ndarray:
    """Positive-class probability for every case, in case order."""
    out = []
    for mb in batch.minibatches(batch_size):
        out.append(predict(model(mb, "eval"), model.heads, branch))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: HierarchyModel, batch: EventBatch, branch: str = "entropy",
             batch_size: int = 32) -> dict[str, float]:
    """Metrics over the cases with an observed label."""
    probs = predict_batch(model, batch, branch, batch_size)
    sel = batch.label_mask
    return metrics(probs[sel], batch.labels[sel])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_arrays(model: HierarchyModel, opt: AdamWState) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v for k, v in model.store.state().items()}
    arrays.update({f"adam_m/{k}": v for k, v in opt.exp_avg.items()})
    arrays.update({f"adam_v/{k}": v for k, v in opt.exp_avg_sq.items()})
    return arrays


def write_checkpoint(path: Path, model: HierarchyModel, opt: AdamWState, cfg: TrainingConfig,
                     epoch: int, best: float) -> None:
    cfg_dict = {"training": cfg.to_dict(), "model": model.cfg.to_dict()}
    manifest = {"config": cfg_dict, "config_hash": config_hash(cfg_dict), "epoch": epoch,
                "step": opt.step, "best_val_auroc": best}
    save_checkpoint(path, checkpoint_arrays(model, opt), manifest)


def restore(path: str | Path) -> tuple[HierarchyModel, AdamWState, TrainingConfig, dict]:
    arrays, manifest = load_checkpoint(path)
    tcfg = TrainingConfig.from_dict(manifest["config"]["training"])
    model = HierarchyModel(ModelConfig.from_dict(manifest["config"]["model"]))
    model.store.load_state({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = AdamWState(lr=tcfg.lr, weight_decay=tcfg.weight_decay, step=manifest["step"])
    opt.exp_avg = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.exp_avg_sq = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return model, opt, tcfg, manifest


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: HierarchyModel
    history: list[dict] = field(default_factory=list)
    best_auroc: float = -math.inf
    best_epoch: int = -1


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(train_set: EventBatch, val_set: EventBatch, cfg: TrainingConfig,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with AdamW; after every epoch log losses and validation metrics,
    write ``last.ckpt`` and, on a new best validation AUROC, ``best.ckpt``.

    Shuffling for epoch ``e`` draws from ``default_rng([seed, e])`` so a resumed
    run replays exactly the batches an uninterrupted run would see.
    """
    out = Path(out_dir) if out_dir is not None else None
    start, best, history = 0, -math.inf, []
    if resume is not None:
        model, opt, saved_cfg, manifest = restore(resume)
        start, best = manifest["epoch"] + 1, manifest["best_val_auroc"]
        if out is not None and (out / "metrics.jsonl").exists():
            history = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()
                       if l.strip() and json.loads(l)["epoch"] < start]
    else:
        model = HierarchyModel(cfg.model_config(train_set.feature_dims))
        opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.params
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("".join(_json_line(r) + "\n" for r in history))
    result = TrainResult(model, history, best)
    with threadpool_limits(limits=1):
        for epoch in range(start, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            steps = 0
            for mb in train_set.minibatches(cfg.batch_size, rng):
                with Tape() as tape:
                    terms = batch_loss(model, mb, cfg)
                    tape.backward(terms.L_total)
                adamw_step(opt, params)
                for k, v in terms.values().items():
                    sums[k] += v
                steps += 1
            record = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
            val = evaluate(model, val_set, cfg.branch, cfg.eval_batch_size)
            record.update({f"val_{k}": v for k, v in val.items()})
            history.append(record)
            log.info("epoch %d %s", epoch, _json_line(record))
            improved = val["auroc"] > best
            if improved:
                best = val["auroc"]
                result.best_epoch = epoch
            if out is not None:
                with (out / "metrics.jsonl").open("a") as fh:
                    fh.write(_json_line(record) + "\n")
                write_checkpoint(out / "last.ckpt", model, opt, cfg, epoch, best)
                if improved:
                    write_checkpoint(out / "best.ckpt", model, opt, cfg, epoch, best)
            if on_epoch is not None:
                on_epoch(record)
            if cfg.stop_at_auroc is not None and val["auroc"] >= cfg.stop_at_auroc:
                break
    result.best_auroc = best
    return result
