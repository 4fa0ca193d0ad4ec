"""Command-line front end: ``tucl {gen,train,eval,uncertainty,ablation}``.

Every command resolves a run configuration in three layers (built-in
defaults, then an optional JSON file given by ``--config``, then explicit
flags) and writes the resolved result to ``resolved_config.json`` in its
output directory.  A single ``--seed`` drives all randomness; each consumer
derives its own stream by hashing the seed with a purpose label.

Exit codes: 0 success, 1 internal error, 2 usage or parameter error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .csvio import atomic_write_text, write_csv
from .dur import DeltaMode, mc_uncertainty
from .errors import (ConfigurationError, CorruptFileError, DimensionError, ParameterError,
                     ValidationError)
from .model import ModelConfig, TuclModel
from .phantom import PhantomSpec, load_dataset, save_dataset
from .trainer import (MODULE_GRID, TrainConfig, evaluate, run_ablation, train,
                      write_ablation_table, write_report)
from .volume_io import MODALITIES, MultiContrastVolume, read_volume, write_volume

log = logging.getLogger("tucl")

USAGE_ERRORS = (ParameterError, ConfigurationError, ValidationError, DimensionError,
                CorruptFileError, FileNotFoundError, NotADirectoryError, PermissionError)


class UsageError(Exception):
    """Raised for bad flags or inputs; mapped to exit code 2."""


# ------------------------------------------------------------------ run config


def default_config() -> dict:
    train_defaults = TrainConfig().to_dict()
    train_defaults.pop("seed")
    model_defaults = ModelConfig().to_dict()
    for key in ("dropout", "use_tpa"):   # owned by the training section
        model_defaults.pop(key)
    phantom = PhantomSpec().to_dict()
    phantom.pop("seed")
    return {
        "seed": 0,
        "train": train_defaults,
        "model": model_defaults,
        "phantom": phantom,
        "data": {"n": 32, "labeled_fraction": 1.0},
        "spacing": [1.0, 1.0, 1.0],
        "uncertainty": {"T": 8},
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where + key!r} must be an object")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(path: str | None, overrides: dict) -> dict:
    cfg = default_config()
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} does not exist")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from None
    return _merge(cfg, overrides)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": int(cfg["seed"])})


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def phantom_spec(cfg: dict) -> PhantomSpec:
    return PhantomSpec.from_dict({**cfg["phantom"], "seed": int(cfg["seed"])})


def echo_config(out_dir: Path, cfg: dict) -> None:
    atomic_write_text(out_dir / "resolved_config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def worker_count() -> int:
    raw = os.environ.get("TUCL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TUCL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TUCL_THREADS must be >= 1, got {n}")
    return n


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _dataset(path: str):
    root = Path(path)
    if not (root / "dataset.json").is_file():
        raise UsageError(f"no dataset found at {root} (missing dataset.json)")
    return load_dataset(root)


def _flag_overrides(args, mapping: dict) -> dict:
    """Nested override dict from flags that were given explicitly."""
    out: dict = {}
    for attr, keys in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


# -------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    overrides = _flag_overrides(args, {
        "seed": ("seed",), "n": ("data", "n"), "labeled_fraction": ("data", "labeled_fraction")})
    cfg = resolve_config(args.config, overrides)
    if args.dims is not None:
        # rescale the tumor geometry with the volume so the radii stay inside it
        d = [int(v) for v in args.dims]
        scale = min(d) / min(cfg["phantom"]["dims"])
        cfg["phantom"].update(dims=d, center=[(v - 1) / 2.0 for v in d],
                              radii=[r * scale for r in cfg["phantom"]["radii"]])
    out = _out_dir(args.out)
    if int(cfg["data"]["n"]) < 1:
        raise ParameterError(f"--n must be >= 1, got {cfg['data']['n']}")
    manifest = save_dataset(out, int(cfg["data"]["n"]), phantom_spec(cfg),
                            float(cfg["data"]["labeled_fraction"]), int(cfg["seed"]))
    echo_config(out, cfg)
    n_lab = sum(e["labeled"] for e in manifest["items"])
    print(f"wrote {manifest['n']} phantoms ({n_lab} labeled) to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = _flag_overrides(args, {"seed": ("seed",), "steps": ("train", "steps")})
    if args.no_tpa:
        overrides.setdefault("train", {})["use_tpa"] = False
    if args.no_dur:
        overrides.setdefault("train", {})["use_dur"] = False
    cfg = resolve_config(args.config, overrides)
    tcfg = train_config(cfg)
    data = _dataset(args.data)
    out = _out_dir(args.out)
    echo_config(out, cfg)
    model = TuclModel(tcfg.model_config(model_config(cfg)), seed=tcfg.seed)
    model, tlog = train(model, data, tcfg)
    model.save(out / "checkpoint", step=tcfg.steps, extra={"train": tcfg.to_dict()})
    tlog.write(out / "train_log.csv", cfg)
    print(f"trained {tcfg.steps} steps; final L_total {tlog.records[-1].total:.6f}; "
          f"checkpoint at {out / 'checkpoint'}")
    return 0


def _load_checkpoint(path: str) -> TuclModel:
    try:
        model, _ = TuclModel.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint {path} not found") from None
    return model


def cmd_eval(args) -> int:
    if args.drop is not None and args.drop not in MODALITIES:
        raise UsageError(f"unknown modality {args.drop!r}; choose from {', '.join(MODALITIES)}")
    overrides = _flag_overrides(args, {"spacing": ("spacing",)})
    cfg = resolve_config(args.config, overrides)
    model = _load_checkpoint(args.ckpt)
    data = _dataset(args.data)
    out = _out_dir(args.out)
    run = {**cfg, "eval": {"checkpoint": str(args.ckpt), "drop": args.drop}}
    echo_config(out, run)
    report = evaluate(model, data, tuple(cfg["spacing"]), args.drop, label=Path(args.ckpt).name)
    write_report(report, out, run)
    row = report.table_row()
    print(" ".join(f"{k}={v:.3f}" for k, v in row.items()))
    return 0


def cmd_uncertainty(args) -> int:
    overrides = _flag_overrides(args, {"seed": ("seed",), "T": ("uncertainty", "T"),
                                       "delta_mode": ("train", "delta_mode")})
    cfg = resolve_config(args.config, overrides)
    T = int(cfg["uncertainty"]["T"])
    if T < 2:
        raise ParameterError(f"--T must be >= 2, got {T}")
    mode = DeltaMode.parse(cfg["train"]["delta_mode"])
    model = _load_checkpoint(args.ckpt)
    try:
        vol = read_volume(args.case)
    except FileNotFoundError:
        raise UsageError(f"case {args.case} not found") from None
    if not isinstance(vol, MultiContrastVolume):
        raise UsageError(f"{args.case} is not a multi-contrast volume")
    out = _out_dir(args.out)
    echo_config(out, {**cfg, "uncertainty_run": {"checkpoint": str(args.ckpt), "case": str(args.case)}})
    workers = min(worker_count(), T)
    _, fld = mc_uncertainty(model, vol, T, seed=int(cfg["seed"]), mode=mode, workers=workers)
    write_volume(MultiContrastVolume(fld.U[None], ("U",)), out / "uncertainty")
    write_csv(out / "uncertainty_summary.csv",
              ["T", "delta_mode", "delta", "mean_U", "max_U", "n_core", "n_boundary", "n_voxels"],
              [[T, str(mode), fld.delta, float(fld.U.mean()), float(fld.U.max()),
                fld.n_core, fld.n_boundary, int(fld.U.size)]], cfg)
    # heat-map data for the axial slice through the volume center
    z = fld.U.shape[2] // 2
    write_csv(out / "uncertainty_slice.csv", ["x", "y", "z", "U", "boundary"],
              ([x, y, z, float(fld.U[x, y, z]), bool(fld.boundary_mask[x, y, z])]
               for x in range(fld.U.shape[0]) for y in range(fld.U.shape[1])), cfg)
    print(f"T={T} delta={fld.delta:.6g} mean_U={fld.U.mean():.6g} max_U={fld.U.max():.6g} "
          f"core={fld.n_core} boundary={fld.n_boundary}")
    return 0


def cmd_ablation(args) -> int:
    overrides = _flag_overrides(args, {"seed": ("seed",), "steps": ("train", "steps")})
    cfg = resolve_config(args.config, overrides)
    drops = [None] + [d for d in (args.drop or [])]
    for d in drops[1:]:
        if d not in MODALITIES:
            raise UsageError(f"unknown modality {d!r}; choose from {', '.join(MODALITIES)}")
    train_data = _dataset(args.data)
    eval_data = _dataset(args.eval_data)
    out = _out_dir(args.out)
    echo_config(out, cfg)
    rows = run_ablation(train_config(cfg), MODULE_GRID, train_data, eval_data, drops,
                        tuple(cfg["spacing"]), model_config(cfg), checkpoint_dir=out)
    write_ablation_table(rows, out / "ablation.csv", cfg)
    for r in rows:
        write_report(r.report, out, cfg, prefix=f"eval_{r.name}_{r.drop or 'none'}")
    for r in rows:
        print(f"{r.name:<14} drop={r.drop or 'none':<6} Dice_Ave={r.report.mean_dice('Ave'):.2f} "
              f"HD95_Ave={r.report.mean_hd95('Ave'):.3f}")
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tucl", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"tucl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration file")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (overrides config)")

    g = sub.add_parser("gen", help="generate a phantom dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--labeled-fraction", dest="labeled_fraction", type=float)
    g.add_argument("--dims", type=int, nargs=3, metavar=("W", "H", "D"))
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a phantom dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--no-tpa", action="store_true", help="bypass prompt attention")
    t.add_argument("--no-dur", action="store_true", help="disable uncertainty refinement")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, seed=False)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--drop", help="zero-fill this modality before inference")
    e.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"))
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("uncertainty", help="emit a Monte-Carlo uncertainty field for one case")
    common(u)
    u.add_argument("--ckpt", required=True)
    u.add_argument("--case", required=True, help="volume container stem")
    u.add_argument("--T", dest="T", type=int)
    u.add_argument("--delta-mode", dest="delta_mode", help="quantile:Q or fixed:V")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_uncertainty)

    a = sub.add_parser("ablation", help="train and evaluate the Base / +TPA / +TPA+DUR grid")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", dest="eval_data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--drop", action="append", help="also evaluate with this modality dropped")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"tucl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("internal error", exc_info=True)
        print(f"tucl {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
