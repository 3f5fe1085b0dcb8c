"""Command-line entry points.

Every subcommand reads a flat ``key = value`` config, takes its seed from the
config (or ``--seed``) and writes into a run directory. Exit codes: 0 on
success, 1 on invalid input or missing prerequisites, 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import metrics, plots, trainer
from .core import RiskStatus, RunConfig, Source
from .dataio import SyntheticSpec, generate_cohort, ingest_tiles, oracle_c_index, write_cohort

log = logging.getLogger("dcmil")

COMMANDS = ("generate-data", "train-c1", "train-c2", "evaluate", "uncertainty", "compare-normal", "report",
            "crossval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------
# configuration


def synthetic_spec(cfg: RunConfig, extra: dict) -> SyntheticSpec:
    """Cohort parameters: geometry and seed follow the run config, ``synthetic.*`` keys override."""
    spec = SyntheticSpec(tile_side=cfg.tile_side, S=cfg.S, T_r=cfg.T_r, rng_seed=cfg.rng_seed)
    types = {f.name: f.type for f in dataclasses.fields(SyntheticSpec)}
    changes = {}
    for key, text in extra.items():
        prefix, _, name = key.partition(".")
        if prefix != "synthetic":
            raise ValueError(f"unknown config section {prefix!r}")
        if name not in types or name == "texture_params":
            raise ValueError(f"unknown synthetic key {name!r}")
        typ = types[name]
        try:
            if typ == "tuple":
                changes[name] = tuple(float(v) if "." in v else int(v) for v in text.split(","))
            elif typ == "bool":
                changes[name] = text.lower() in ("true", "1", "yes")
            elif typ == "int":
                changes[name] = int(text)
            else:
                changes[name] = float(text)
        except ValueError:
            raise ValueError(f"synthetic key {name!r}: cannot parse {text!r}") from None
    spec = dataclasses.replace(spec, **changes)
    spec.validate()
    return spec


def load_config(args) -> tuple:
    extra: dict = {}
    cfg = RunConfig.load(args.config, extra) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    return cfg, extra


def output_root() -> Path:
    return Path(os.environ.get("DCMIL_RUN_DIR", "runs"))


def run_dir_of(args) -> Path:
    return Path(args.out) if args.out else output_root() / "run"


def data_dir_of(args, run_dir: Optional[Path] = None) -> Path:
    if args.data:
        return Path(args.data)
    if run_dir is not None and (run_dir / "data_source.txt").exists():
        return Path((run_dir / "data_source.txt").read_text().strip())
    return output_root() / "data"


def load_bags(data_dir: Path, cfg: RunConfig) -> list:
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}; run generate-data first")
    bags = ingest_tiles(data_dir, manifest, cfg.T_r)
    if not bags:
        raise ValueError(f"manifest {manifest} lists no instances")
    return bags


def prepare_run(args):
    cfg, _ = load_config(args)
    run_dir = run_dir_of(args)
    data_dir = data_dir_of(args, run_dir)
    bags = load_bags(data_dir, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.cfg")
    (run_dir / "data_source.txt").write_text(str(data_dir.resolve()) + "\n")
    plan = trainer.make_folds(bags, cfg.k_folds, cfg.rng_seed)
    return cfg, run_dir, bags, plan


def folds_of(args, cfg: RunConfig) -> list:
    if args.fold is None:
        return list(range(cfg.k_folds))
    if not 0 <= args.fold < cfg.k_folds:
        raise ValueError(f"--fold must lie in 0..{cfg.k_folds - 1}")
    return [args.fold]


def embeddings_of(run_dir: Path, fold: int) -> dict:
    path = run_dir / "exports" / f"fold_{fold}_embeddings.npz"
    if not path.exists():
        raise FileNotFoundError(f"missing embeddings {path}; run train-c1 first")
    return trainer.load_representations(path)


# ----------------------------------------------------------------------
# artifacts


def export_saliency(model, bags, out_dir: Path, n_bags: int = 4, n_instances: int = 2) -> int:
    """Overlay the saliency mask of level s on the tile of level s+1."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for bag in bags[:n_bags]:
        levels = [lv[:n_instances] for lv in trainer.bag_levels(bag, model.S)]
        with torch.enable_grad():
            res = model(levels)
        for s, mask in enumerate(res["masks"]):
            for i in range(levels[0].shape[0]):
                path = out_dir / f"{bag.patient_id}_{i:03d}_s{s + 2}.png"
                plots.save_saliency_overlay(levels[s + 1][i].numpy(), mask.values[i].numpy(), path)
                written += 1
    return written


def indicator_heatmaps(run_dir: Path, out_dir: Path, per_fold: int = 3) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for path in sorted((run_dir / "exports").glob("fold_*_indicators.csv")):
        fold = path.stem.split("_")[1]
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_pid: dict = {}
        for r in rows:
            by_pid.setdefault(r["patient_id"], []).append(r)
        for pid in sorted(by_pid)[:per_fold]:
            group = by_pid[pid]
            coords = [(int(r["row"]), int(r["col"])) for r in group]
            values = [float(r["selected"]) for r in group]
            plots.grid_heatmap(coords, values, out_dir / f"fold_{fold}_{pid}.png",
                               title=f"{pid} selected instances", cmap="magma")
            written += 1
    return written


def read_predictions(run_dir: Path):
    path = run_dir / "exports" / "predictions.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing predictions {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["time_months"]) for r in rows])
    events = np.array([int(r["event"]) for r in rows])
    high = np.array([int(r["high_group"]) for r in rows], dtype=bool)
    return times, events, high


# ----------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    cfg, extra = load_config(args)
    spec = synthetic_spec(cfg, extra)
    out = Path(args.out) if args.out else output_root() / "data"
    bags, truth = generate_cohort(spec)
    manifest = write_cohort(bags, truth, out)
    n_tumor = sum(b.source is Source.TUMOR for b in bags)
    print(f"wrote {manifest} ({n_tumor} tumor + {len(bags) - n_tumor} normal bags, "
          f"{sum(b.n_instances for b in bags)} instances); oracle C-index {oracle_c_index(truth):.3f}")
    return 0


def cmd_train_c1(args) -> int:
    cfg, run_dir, bags, plan = prepare_run(args)
    for fold in folds_of(args, cfg):
        train, val, test, _ = trainer.fold_partition(bags, plan, fold, cfg)
        fold_dir = run_dir / f"fold_{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        step_log = trainer.LeakageLog(fold_dir / "training_ids.log", plan.test_ids(fold))
        try:
            model, history = trainer.train_curriculum1(train, cfg, val, seed=cfg.rng_seed + fold, step_log=step_log)
        finally:
            step_log.close()
        trainer.save_c1(model, fold_dir)
        reps = trainer.extract_representations(model, bags)
        trainer.save_representations(reps, run_dir / "exports" / f"fold_{fold}_embeddings.npz")
        n = export_saliency(model, test, run_dir / "exports" / "saliency" / f"fold_{fold}")
        last = history["val"][-1] if history["val"] else float("nan")
        print(f"fold {fold}: curriculum I done (validation loss {last:.4f}, {n} saliency overlays)")
    return 0


def cmd_train_c2(args) -> int:
    cfg, run_dir, bags, plan = prepare_run(args)
    for fold in folds_of(args, cfg):
        train, val, _, normals = trainer.fold_partition(bags, plan, fold, cfg)
        fold_dir = run_dir / f"fold_{fold}"
        reps = embeddings_of(run_dir, fold)
        step_log = trainer.LeakageLog(fold_dir / "training_ids.log", plan.test_ids(fold), mode="a")
        try:
            model, history = trainer.train_curriculum2(reps, train, cfg, val, normals, seed=cfg.rng_seed + fold,
                                                       step_log=step_log)
        finally:
            step_log.close()
        trainer.save_c2(model, fold_dir)
        trainer.write_indicator_csv(model, reps, bags, run_dir / "exports" / f"fold_{fold}_indicators.csv")
        best = min(history["val"]) if history["val"] else float("nan")
        print(f"fold {fold}: curriculum II done (best validation Cox loss {best:.4f})")
    return 0


def cmd_evaluate(args) -> int:
    cfg, run_dir, bags, plan = prepare_run(args)
    folds = folds_of(args, cfg)
    for fold in folds:  # check every prerequisite before writing anything
        for name in [f"c1_branch{s + 1}.pt" for s in range(cfg.S)] + ["c2.pt"]:
            if not (run_dir / f"fold_{fold}" / name).exists():
                raise FileNotFoundError(f"fold {fold}: missing checkpoint {name}; run train-c1 and train-c2 first")
    rows, preds = [], []
    for fold in folds:
        _, _, test, _ = trainer.fold_partition(bags, plan, fold, cfg)
        model = trainer.load_c2(cfg, run_dir / f"fold_{fold}")
        risks = trainer.predict_risks(model, embeddings_of(run_dir, fold), test)
        c, p, high = trainer.fold_metrics(test, risks)
        rows.append({"fold": str(fold), "c_index": c, "logrank_p": p, "n_patients": len(test)})
        for b, r, h in zip(test, risks, high):
            preds.append((fold, b.patient_id, b.survival.time_months, b.survival.event, float(r), int(h)))
        print(f"fold {fold}: C-index {c:.4f}, logrank p {p:.3g}")
    summary = trainer.write_metrics(run_dir, cfg, rows, preds)
    print(f"mean C-index {summary['mean']:.4f} +/- {summary['std']:.4f}, "
          f"pooled logrank p {summary['pooled_logrank_p']:.3g}")
    return 0


def cmd_crossval(args) -> int:
    cfg, run_dir, bags, _ = prepare_run(args)
    folds = None if args.fold is None else folds_of(args, cfg)
    t0 = time.time()
    summary = trainer.crossval_run(bags, cfg, run_dir, shuffle_labels=args.shuffle_labels, folds=folds,
                                   progress=print)
    print(f"mean C-index {summary['mean']:.4f} +/- {summary['std']:.4f}, "
          f"pooled logrank p {summary['pooled_logrank_p']:.3g} ({time.time() - t0:.0f}s)")
    return make_report(run_dir)


def cmd_uncertainty(args) -> int:
    cfg, run_dir, bags, plan = prepare_run(args)
    out_dir = run_dir / "uncertainty"
    out_dir.mkdir(exist_ok=True)
    for fold in folds_of(args, cfg):
        _, _, test, _ = trainer.fold_partition(bags, plan, fold, cfg)
        model = trainer.load_c1(cfg, run_dir / f"fold_{fold}")
        labeled = [b for b in test if b.risk_status is not RiskStatus.UNDEFINED]
        if not labeled:
            raise ValueError(f"fold {fold}: no labeled test bags")
        levels = [torch.cat([trainer.bag_levels(b, cfg.S)[s] for b in labeled]) for s in range(cfg.S)]
        y = np.concatenate([np.full(b.n_instances, b.risk_status.value) for b in labeled])
        rep = metrics.mc_dropout_uncertainty(model, levels, cfg.mc_passes, cfg.mc_dropout, seed=cfg.rng_seed + fold)
        correct = (rep.mean_prob > 0.5).astype(int) == y
        try:
            rep = rep.apply_threshold(correct)
            thr = rep.threshold
        except ValueError as exc:
            log.warning("fold %d: no Youden threshold (%s)", fold, exc)
            thr = None
        with open(out_dir / f"fold_{fold}_uncertainty.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "instance_index", "label", "mean_prob", "std", "correct", "confident"])
            k = 0
            for b in labeled:
                for i in range(b.n_instances):
                    conf = "" if thr is None else int(rep.confident_mask[k])
                    w.writerow([b.patient_id, i, int(y[k]), f"{rep.mean_prob[k]:.8g}",
                                f"{rep.per_instance_std[k]:.8g}", int(correct[k]), conf])
                    k += 1
        plots.plot_uncertainty(rep.per_instance_std, correct, thr, out_dir / f"fold_{fold}_uncertainty.png")
        msg = "undefined" if thr is None else f"{thr:.4g} (J={rep.youden_J:.3f})"
        print(f"fold {fold}: accuracy {correct.mean():.3f}, Youden threshold {msg}")
    return 0


def cmd_compare_normal(args) -> int:
    cfg, run_dir, bags, plan = prepare_run(args)
    out_dir = run_dir / "compare_normal"
    out_dir.mkdir(exist_ok=True)
    normals = [b for b in bags if b.source is Source.NORMAL]
    if not normals:
        raise ValueError("the cohort has no normal bags")
    for fold in folds_of(args, cfg):
        reps = embeddings_of(run_dir, fold)
        reference = np.concatenate([reps[b.patient_id]["g"] for b in normals])
        _, _, test, _ = trainer.fold_partition(bags, plan, fold, cfg)
        with open(out_dir / f"fold_{fold}_distances.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "risk_status", "instance_index", "row", "col", "distance"])
            for status in (RiskStatus.HIGH, RiskStatus.LOW):
                group = [b for b in test if b.risk_status is status]
                if not group:
                    continue
                query = np.concatenate([reps[b.patient_id]["g"] for b in group])
                d, counts, edges = metrics.distance_heatmap(reference, query)
                plots.plot_distance_histogram(counts, edges, out_dir / f"fold_{fold}_{status.name.lower()}.png",
                                              title=f"{status.name} risk vs normal")
                k = 0
                for b in group:
                    for i, inst in enumerate(b.instances):
                        w.writerow([b.patient_id, status.name, i, *inst.coordinates, f"{d[k]:.8g}"])
                        k += 1
                    plots.grid_heatmap([inst.coordinates for inst in b.instances], d[k - b.n_instances:k],
                                       out_dir / f"fold_{fold}_{b.patient_id}.png", title=f"{b.patient_id} distance")
                print(f"fold {fold}: {status.name} instances, median distance {np.median(d):.2f}")
    return 0


def make_report(run_dir: Path) -> int:
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run evaluate or crossval first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)
    fold_rows = [r for r in rows if r["fold"].isdigit()]
    pooled = next((r for r in rows if r["fold"] == "pooled"), None)
    with open(out / "ci_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "c_index", "logrank_p", "n_patients"])
        for r in rows:
            w.writerow([r["fold"], r["c_index"], r["logrank_p"], r["n_patients"]])
    times, events, high = read_predictions(run_dir)
    p = float(pooled["logrank_p"]) if pooled and pooled["logrank_p"] else None
    plots.plot_km(times, events, high, out / "km.png", p_value=p, title="held-out risk groups")
    n = indicator_heatmaps(run_dir, out / "indicators")
    for r in fold_rows + [r for r in rows if not r["fold"].isdigit()]:
        print(f"{r['fold']:>7}  C-index {r['c_index'] or '-':>12}  logrank p {r['logrank_p'] or '-'}")
    print(f"report written to {out} ({n} indicator heatmaps)")
    return 0


def cmd_report(args) -> int:
    return make_report(run_dir_of(args))


HANDLERS = {
    "generate-data": cmd_generate_data,
    "train-c1": cmd_train_c1,
    "train-c2": cmd_train_c2,
    "evaluate": cmd_evaluate,
    "uncertainty": cmd_uncertainty,
    "compare-normal": cmd_compare_normal,
    "report": cmd_report,
    "crossval": cmd_crossval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcmil", description="Multi-magnification survival MIL pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="output directory (default under $DCMIL_RUN_DIR)")
        p.add_argument("--seed", type=int, help="override rng_seed")
        if name != "generate-data":
            p.add_argument("--fold", type=int, help="only this fold (default: all)")
            p.add_argument("--data", help="cohort directory holding manifest.csv")
        if name == "crossval":
            p.add_argument("--shuffle-labels", action="store_true", help="permute survival records (control)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (ValueError, FileNotFoundError, UsageError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("command %s failed", args.command)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
