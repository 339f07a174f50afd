"""Command-line entry point: ``trex {synth,train,eval,predict,explain,stats,ablate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .data.cohort import (
    ManifestError,
    Outcome,
    TimeBin,
    assign_retrospective_labels,
    build_pairs,
    load_manifest,
    normalize_dt,
)
from .data.images import ImageStore, to_model_input
from .data.sampling import split_folds
from .data.synth import synth_cohort, write_synth
from .encoder import named_config
from .evaluation import (
    bin_report,
    contingency,
    format_report,
    mcnemar,
    patient_correctness,
    read_predictions,
    reaggregate,
    write_predictions,
    write_report,
)
from .fusion import lr_probability
from .interpret import attn_heatmap, grad_cam, overlay_export, write_overlay_index
from .nn_core import ConfigError
from .persistence import CheckpointError, RunConfig, load_checkpoint, load_run_config, write_resolved
from .pipeline import crossval, evaluate_checkpoints, with_ablation, write_folds
from .training import fit, fold_pairs, set_threads

log = logging.getLogger("trex")

RESOLVED_NAME = "config.resolved"
ABLATIONS = ("full", "no_dca", "no_dt", "no_balance", "no_augment")
K_SWEEP = (1, 3, 6, 9, 12)
BACKBONES = ("toy", "tiny", "small")


def _config(args, run_dir: Path | None = None) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config)
    elif run_dir is not None and (run_dir / RESOLVED_NAME).exists():
        cfg = load_run_config(run_dir / RESOLVED_NAME)
    else:
        cfg = RunConfig()
    return cfg.override(seed=args.seed, model=args.model, task=args.task, k=args.k)


def _data_dir(args, cfg: RunConfig) -> Path:
    d = getattr(args, "data", None) or cfg.run.data_dir
    if not d:
        raise SystemExit("error: no dataset directory (use --data or run.data_dir)")
    return Path(d)


def _load_data(args, cfg: RunConfig):
    root = _data_dir(args, cfg)
    cohort = load_manifest(root / "manifest.csv")
    return cohort, ImageStore(root, cfg.encoder.input_hw)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    synth = synth_cohort(cfg.synth, cfg.seed)
    write_synth(synth, out)
    write_resolved(cfg, out / RESOLVED_NAME)
    print(f"wrote {len(synth.cohort)} patients, {len(synth.images)} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    cohort, store = _load_data(args, cfg)
    out = Path(args.out)
    write_resolved(cfg, out / RESOLVED_NAME)
    _, assignment = fit(cohort, store, cfg.train, cfg.model_config(), out)
    write_folds(assignment, out / "folds.csv")
    print(f"trained {cfg.train.k_folds} folds into {out}")
    return 0


def _write_eval(records, out: Path, folds) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(records, out / "predictions.csv")
    report = bin_report(records, folds)
    write_report(report, out / "report.csv")
    (out / "report.txt").write_text(format_report(report) + "\n", encoding="utf-8")
    print(format_report(report))


def cmd_eval(args) -> int:
    run_dir = Path(args.run or args.out)
    cfg = _config(args, run_dir)
    cohort, store = _load_data(args, cfg)
    out = Path(args.out)
    records = evaluate_checkpoints(cohort, store, cfg.train, run_dir, cfg.model_config(), cfg.eval.k, cfg.eval.how)
    if out != run_dir:
        write_resolved(cfg, out / RESOLVED_NAME)
    _write_eval(records, out, range(cfg.train.k_folds))
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    root = _data_dir(args, cfg)
    store = ImageStore(root, model.cfg.encoder.input_hw)
    rows = []  # (ref, later, dt_norm)
    if args.pairs:
        with open(args.pairs, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows.append((rec["ref_image"], rec["later_image"], normalize_dt(int(rec["dt_days"]))))
    else:
        cohort = assign_retrospective_labels(load_manifest(root / "manifest.csv"))
        rows = [(p.ref_image, p.later_image, p.dt_norm) for p in build_pairs(cohort, cfg.train.task)]
    probs = []
    for i in range(0, len(rows), 64):
        chunk = rows[i : i + 64]
        later = torch.from_numpy(to_model_input(np.stack([store[r[1]] for r in chunk])))
        ref = torch.from_numpy(to_model_input(np.stack([store[r[0]] for r in chunk])))
        dt = torch.tensor([r[2] for r in chunk], dtype=torch.float32)
        with torch.no_grad():
            probs.extend(lr_probability(model(ref, later, dt)).tolist())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("ref_image", "later_image", "dt_norm", "prob_lr"))
        for (ref, later, dt), p in zip(rows, probs):
            w.writerow((ref, later, f"{dt:.8f}", f"{p:.8f}"))
    print(f"scored {len(rows)} pairs into {out}")
    return 0


def cmd_explain(args) -> int:
    run_dir = Path(args.run)
    cfg = _config(args, run_dir)
    cohort, store = _load_data(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    assignment = split_folds(cohort, cfg.train.k_folds, cfg.seed)
    index_rows, written = [], 0
    for fold in range(cfg.train.k_folds):
        if written >= args.n:
            break
        model, _ = load_checkpoint(run_dir / f"fold{fold}.ckpt", cfg.model_config())
        _, val = fold_pairs(cohort, assignment, fold, cfg.train.task)
        chosen = [p for p in val if p.label is Outcome.LR and p.bin is TimeBin.M0] or list(val)
        for p in chosen[: args.n - written]:
            later_img = store[p.later_image]
            later = torch.from_numpy(to_model_input(later_img[None]))
            ref = torch.from_numpy(to_model_input(store[p.ref_image][None]))
            dt = torch.tensor([p.dt_norm], dtype=torch.float32)
            stem = f"{p.patient_id}_{p.date_days:+05d}_{written:03d}"
            cam = grad_cam(model, ref, later, dt)[0]
            name = f"{stem}_gradcam.{args.format}"
            overlay_export(later_img, cam, out / name, args.alpha)
            index_rows.append((name, p.patient_id, p.date_days, "gradcam", f"class={cam.detail['class']}"))
            if model.cfg.kind == "trex" and not model.cfg.no_dca:
                model.retain_features = True
                with torch.no_grad():
                    model(ref, later, dt)
                model.retain_features = False
                dca = model.last["dca"]
                n_tokens = dca.attn_res2fup.shape[-2]
                q = n_tokens // 2
                hm = attn_heatmap(dca, q, "res2fup")
                name = f"{stem}_attn_q{q}.{args.format}"
                overlay_export(later_img, hm, out / name, args.alpha)
                index_rows.append((name, p.patient_id, p.date_days, "attention", f"query_index={q}"))
            written += 1
    write_overlay_index(index_rows, out / "overlay_index.csv")
    write_resolved(cfg, out / RESOLVED_NAME)
    print(f"wrote {len(index_rows)} overlays to {out}")
    return 0


def cmd_stats(args) -> int:
    k = args.k if args.k is not None else 3
    a = read_predictions(args.a, k)
    b = read_predictions(args.b, k)
    res = mcnemar(contingency(patient_correctness(a), patient_correctness(b)))
    odds = res.odds_ratio
    summary = {
        "b": res.b,
        "c": res.c,
        "p_value": res.p_value,
        "odds_ratio": "undefined" if odds is None else ("inf" if odds == float("inf") else odds),
        "exact": res.exact,
    }
    text = json.dumps(summary, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "mcnemar.json").write_text(text + "\n", encoding="utf-8")
    return 0


def _summary_rows(sweep: str, setting: str, report) -> list[tuple]:
    rows = []
    for r in report.rows:
        if r.fold is None and r.group == "all":
            m = r.metrics
            rows.append((sweep, setting, r.bin, _f(m.balanced_accuracy), _f(m.sensitivity), _f(m.specificity)))
    return rows


def _f(v) -> str:
    return "" if v is None else f"{v:.6f}"


def cmd_ablate(args) -> int:
    cfg = _config(args)
    cohort, store = _load_data(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / RESOLVED_NAME)
    rows: list[tuple] = []
    wanted = set(args.sweep)
    full_records = None
    if wanted & {"flags", "k"}:
        for name in ABLATIONS if "flags" in wanted else ("full",):
            tcfg = with_ablation(cfg.train, name)
            cv = crossval(cohort, store, tcfg, replace(cfg.model_config(), no_dca=tcfg.no_dca, no_dt=tcfg.no_dt),
                          cfg.eval.k, cfg.eval.how)
            if name == "full":
                full_records = cv.records
            rows.extend(_summary_rows("flags", name, cv.report))
    if "k" in wanted and full_records is not None:
        for k in K_SWEEP:
            recs = reaggregate(full_records, k, cfg.eval.how)
            rows.extend(_summary_rows("k", str(k), bin_report(recs, range(cfg.train.k_folds))))
    if "backbone" in wanted:
        for name in BACKBONES:
            enc = replace(named_config(name), input_hw=cfg.encoder.input_hw)
            mcfg = replace(cfg.model_config(), encoder=enc)
            cv = crossval(cohort, store, cfg.train, mcfg, cfg.eval.k, cfg.eval.how)
            rows.extend(_summary_rows("backbone", name, cv.report))
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sweep", "setting", "bin", "balanced_accuracy", "sensitivity", "specificity"))
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key=value run configuration")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--model", choices=("trex", "cat", "si"), help="overrides train.model_kind")
    common.add_argument("--task", choices=("surveillance", "response"), help="overrides train.task")
    common.add_argument("--k", type=int, help="top-K aggregation size (overrides eval.k)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trex", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="cross-validated training")
    s.add_argument("--data", help="dataset directory holding manifest.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score held-out folds and write the binned report")
    s.add_argument("--data")
    s.add_argument("--run", help="training output directory (defaults to --out)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="score a set of image pairs with one checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--pairs", help="CSV with ref_image,later_image,dt_days (default: all task pairs)")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("explain", parents=[common], help="Grad-CAM and attention overlays")
    s.add_argument("--data")
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16, help="number of pairs to explain")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("stats", parents=[common], help="McNemar test between two prediction files")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("ablate", parents=[common], help="ablation, K and backbone sweeps")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--sweep", nargs="+", choices=("flags", "k", "backbone"), default=["flags", "k", "backbone"])
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    set_threads()
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
