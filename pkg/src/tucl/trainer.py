"""Training loop for the weighted objective, evaluation, and ablation orchestration."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .csvio import write_csv
from .dur import DeltaMode, UncertaintyField, dur_loss, mc_uncertainty
from .errors import ConfigurationError, ParameterError
from .losses import LossWeights, seg_loss, total_loss
from .metrics import (HD95_CONVENTION, TABLE_REGIONS, CaseRegion, EvalReport, dice, hd95,
                      volume)
from .model import ModelConfig, TuclModel, binarize
from .rng import Stream
from .tpa import cycle_loss
from .volume_io import REGIONS, RegionMask, drop_modality

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = LossWeights()
    dropout: float = 0.1
    mc_samples: int = 4             # T for the in-training uncertainty refresh
    eval_mc_samples: int = 8        # T at evaluation / uncertainty emission
    dur_refresh: int = 5            # max age (steps) of a cached uncertainty field
    dur_warmup: float = 0.2         # fraction of steps before the DUR term switches on
    delta_mode: str = "quantile:0.9"
    seed: int = 0
    use_tpa: bool = True
    use_dur: bool = True
    labeled_fraction: float = 1.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.mc_samples < 2 or self.eval_mc_samples < 2:
            raise ParameterError("Monte-Carlo sample counts must be >= 2")
        if self.dur_refresh < 1:
            raise ParameterError("dur_refresh must be >= 1")
        if not 0 <= self.dur_warmup < 1:
            raise ParameterError("dur_warmup must be a fraction in [0, 1)")
        if not 0 < self.labeled_fraction <= 1:
            raise ParameterError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        DeltaMode.parse(self.delta_mode)

    @property
    def effective_weights(self) -> LossWeights:
        """Loss weights with the toggled-off terms forced to zero."""
        return replace(self.weights,
                       lambda2=self.weights.lambda2 if self.use_tpa else 0.0,
                       lambda3=self.weights.lambda3 if self.use_dur else 0.0)

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.dur_warmup * self.steps))

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        return replace(base or ModelConfig(), dropout=self.dropout, use_tpa=self.use_tpa)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown training options {sorted(extra)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    seg: float
    tpa: float
    dur: float
    total: float
    grad_norm: float
    delta: float | None
    wall_time: float


@dataclass
class TrainLog:
    weights: LossWeights
    records: list[StepRecord] = field(default_factory=list)

    COLUMNS = ("step", "L_seg", "L_TPA", "L_DUR", "L_total", "grad_norm", "delta")

    def column(self, name: str) -> np.ndarray:
        attr = {"L_seg": "seg", "L_TPA": "tpa", "L_DUR": "dur", "L_total": "total"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.records], dtype=float)

    def rows(self):
        for r in self.records:
            yield (r.step, r.seg, r.tpa, r.dur, r.total, r.grad_norm, r.delta)

    def write(self, path, config: dict | None = None) -> None:
        # wall time lives in a sibling file so this one is byte-reproducible
        write_csv(path, list(self.COLUMNS), self.rows(), config)
        timing = Path(path).with_name(Path(path).stem + "_timing.csv")
        write_csv(timing, ["step", "wall_time_s"],
                  ((r.step, r.wall_time) for r in self.records), config)


def _labeled(dataset) -> list[tuple[str, object, RegionMask]]:
    out = []
    for i, item in enumerate(dataset):
        if len(item) == 3:
            case, vol, mask = item
        else:
            (vol, mask), case = item, f"case_{i:03d}"
        if mask is not None:
            out.append((case, vol, mask))
    return out


def train(model: TuclModel, dataset, cfg: TrainConfig) -> tuple[TuclModel, TrainLog]:
    """Adam on ``λ1·L_seg + λ2·L_TPA + λ3·L_DUR`` over the labeled items of ``dataset``.

    ``dataset`` holds ``(volume, mask_or_None)`` pairs or ``(case, volume, mask)``
    triples; unlabeled items are skipped.  Deterministic given ``cfg.seed``.
    """
    labeled = _labeled(dataset)
    if not labeled:
        raise ConfigurationError("dataset has no labeled items")
    if model.config.use_tpa != cfg.use_tpa:
        raise ConfigurationError("model TPA setting does not match the training config")
    w = cfg.effective_weights
    mode = DeltaMode.parse(cfg.delta_mode)
    root = Stream(cfg.seed, "train")
    params = model.parameters()
    adam: dict = {}
    fields_cache: dict[int, tuple[int, UncertaintyField]] = {}
    order: list[int] = []
    epoch = 0
    tlog = TrainLog(w)
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = [int(i) for i in root.split("epoch", epoch).generator.permutation(len(labeled))]
                epoch += 1
            batch.append(order.pop(0))
        dur_on = cfg.use_dur and step > cfg.warmup_steps
        seg_parts, tpa_parts, dur_parts, deltas = [], [], [], []
        for idx in batch:
            _, vol, mask = labeled[idx]
            out = model.run(vol, stochastic=True, seed=root.split("dropout", step, idx))
            seg_parts.append(seg_loss(out.prob, mask.array))
            y_hat = RegionMask(out.prob)
            if cfg.use_tpa:
                tpa_parts.append(cycle_loss(model.prompts, out.prompt_features, y_hat, model.phi))
            if dur_on:
                cached = fields_cache.get(idx)
                if cached is None or step - cached[0] >= cfg.dur_refresh:
                    _, fld = mc_uncertainty(model, vol, cfg.mc_samples,
                                            seed=root.split("mc", step, idx), mode=mode)
                    cached = (step, fld)
                    fields_cache[idx] = cached
                dur_parts.append(dur_loss(y_hat, mask, cached[1], w.alpha, w.beta))
                deltas.append(cached[1].delta)
        n = float(len(batch))
        parts = {"seg": _batch_mean(seg_parts, n)}
        parts["tpa"] = _batch_mean(tpa_parts, n) if tpa_parts else T.Tensor(0.0)
        parts["dur"] = _batch_mean(dur_parts, n) if dur_parts else T.Tensor(0.0)
        loss = total_loss(parts, w)
        model.zero_grad()
        T.backward(loss)
        grads = [p.grad for p in params]
        gnorm = T.global_norm(grads)
        if not math.isfinite(gnorm):
            raise FloatingPointError(f"non-finite gradient norm at step {step}")
        T.adam_step(params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        tlog.records.append(StepRecord(
            step, parts["seg"].item(), parts["tpa"].item(), parts["dur"].item(), loss.item(),
            gnorm, float(np.mean(deltas)) if deltas else None, time.perf_counter() - t0))
        if step % 50 == 0 or step == cfg.steps:
            log.info("step %d total %.4f seg %.4f tpa %.4f dur %.4f", step,
                     loss.item(), parts["seg"].item(), parts["tpa"].item(), parts["dur"].item())
    model.zero_grad()
    return model, tlog


def _batch_mean(parts, n):
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    return acc * (1.0 / n) if n > 1 else acc


# ------------------------------------------------------------------ evaluation


def evaluate(model: TuclModel, cases, spacing=(1.0, 1.0, 1.0), drop: str | None = None,
             label: str = "") -> EvalReport:
    """Deterministic inference and per-region metrics on ``(case, volume, mask)`` triples."""
    spacing = tuple(float(s) for s in np.broadcast_to(np.asarray(spacing, dtype=float), (3,)))
    rows = []
    for case, vol, mask in _labeled(cases):
        x = drop_modality(vol, drop) if drop else vol
        with T.no_grad():
            pred = binarize(model.forward(x)).array
        truth = mask.array
        for region in TABLE_REGIONS:
            c = REGIONS.index(region)
            rows.append(CaseRegion(case, region, dice(pred[c], truth[c]), hd95(pred[c], truth[c], spacing),
                                   volume(pred[c], spacing), volume(truth[c], spacing)))
    return EvalReport(rows, spacing, label, {"drop": drop, "hd95_convention": HD95_CONVENTION})


def write_report(report: EvalReport, out_dir, config: dict | None = None, prefix: str = "eval") -> None:
    """Per-(case, region) CSV with aggregate rows, a summary CSV, and plot-data CSV."""
    out = Path(out_dir)
    notes = (HD95_CONVENTION, f"spacing_mm={list(report.spacing)}", f"drop={report.meta.get('drop')}")
    rows = [(r.case, r.region, r.dice, r.hd95, r.pred_volume, r.true_volume) for r in report.rows]
    for region in TABLE_REGIONS:
        sel = [r for r in report.rows if r.region == region]
        rows.append(("MEAN", region, report.mean_dice(region), report.mean_hd95(region),
                     float(np.mean([r.pred_volume for r in sel])),
                     float(np.mean([r.true_volume for r in sel]))))
    rows.append(("MEAN", "Ave", report.mean_dice("Ave"), report.mean_hd95("Ave"), None, None))
    write_csv(out / f"{prefix}_cases.csv",
              ["case", "region", "dice_pct", "hd95_mm", "pred_volume_mm3", "true_volume_mm3"],
              rows, config, notes)
    summary = report.summary()
    write_csv(out / f"{prefix}_summary.csv", list(summary), [list(summary.values())], config, notes)
    plot_rows = [(r.case, r.region, r.true_volume, r.pred_volume,
                  (r.pred_volume + r.true_volume) / 2.0, r.pred_volume - r.true_volume)
                 for r in report.rows]
    write_csv(out / f"{prefix}_plot_data.csv",
              ["case", "region", "true_volume_mm3", "pred_volume_mm3", "mean_volume_mm3",
               "diff_volume_mm3"], plot_rows, config, notes)


# -------------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    name: str
    drop: str | None
    report: EvalReport


def run_ablation(base: TrainConfig, grid: list[dict], train_data, eval_data,
                 drops=(None,), spacing=(1.0, 1.0, 1.0), model_config: ModelConfig | None = None,
                 checkpoint_dir=None) -> list[AblationRow]:
    """Train one model per grid entry, evaluate it under every entry of ``drops``.

    Each grid entry is a dict of :class:`TrainConfig` overrides, optionally with
    a ``name``.  Modality drops reuse the same trained checkpoint.
    """
    if not grid:
        raise ConfigurationError("ablation grid is empty")
    rows = []
    for i, delta in enumerate(grid):
        delta = dict(delta)
        name = delta.pop("name", f"config_{i}")
        cfg = replace(base, **delta)
        model = TuclModel(cfg.model_config(model_config), seed=cfg.seed)
        train(model, train_data, cfg)
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"{name}_ckpt", step=cfg.steps)
        for d in drops:
            rows.append(AblationRow(name, d, evaluate(model, eval_data, spacing, d, label=name)))
    return rows


def write_ablation_table(rows: list[AblationRow], path, config: dict | None = None) -> None:
    cols = list(rows[0].report.table_row())
    write_csv(path, ["config", "drop"] + cols,
              [[r.name, r.drop or "none"] + list(r.report.table_row().values()) for r in rows],
              config, (HD95_CONVENTION,))


MODULE_GRID = [
    {"name": "Base", "use_tpa": False, "use_dur": False},
    {"name": "Base+TPA", "use_tpa": True, "use_dur": False},
    {"name": "Base+TPA+DUR", "use_tpa": True, "use_dur": True},
]
