"""Command-line entry point: synth, train, eval, predict, ablate, inspect.

Every command that takes ``--out`` writes ``config.json`` there with the fully
resolved settings. Artifacts depend only on argv, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import archive
from .backbone import BackboneConfig
from .data import (EXTENDED_AGE_RANGE, AGE_RANGE, ManifestError, SynthConfig, load_manifest, merge_scores, split,
                   synth_generate)
from .graph import SchemaError, build_graphs, load_roi_schema
from .pipeline import (BoneAgeModel, CheckpointError, ModelConfig, TrainConfig, TrainingAborted, count_params,
                       evaluate, load_checkpoint, run_ablation, save_checkpoint, train, write_log_csv)

log = logging.getLogger("boneage")

ABLATION_TOKENS = ("agconv", "rgconv", "shared", "pa", "ca")


class CliError(Exception):
    pass


# -- argument handling --------------------------------------------------------------

def parse_ablation(text: str | None) -> dict:
    """``"agconv,pa,ca"`` -> ModelConfig overrides; unlisted attention blocks are off."""
    if text is None:
        return {}
    tokens = [t.strip().lower() for t in text.split(",") if t.strip()]
    unknown = sorted(set(tokens) - set(ABLATION_TOKENS))
    if unknown:
        raise CliError(f"--ablation: unknown flag(s) {unknown}; choose from {list(ABLATION_TOKENS)}")
    groupings = [t for t in tokens if t in ("agconv", "rgconv", "shared")]
    if len(groupings) > 1:
        raise CliError(f"--ablation: pick one of agconv/rgconv/shared, got {groupings}")
    return {"grouping": groupings[0] if groupings else "agconv", "use_pa": "pa" in tokens, "use_ca": "ca" in tokens}


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise CliError(f"{args.command} needs --{name.replace('_', '-')}")


def _schema(args):
    return load_roi_schema(_existing(args.schema, "schema"))


def _samples(args, path):
    age_range = EXTENDED_AGE_RANGE if args.extended_ages else AGE_RANGE
    samples = load_manifest(path, age_range=age_range)
    if args.scores is not None:
        samples = merge_scores(samples, _existing(args.scores, "score table"))
    return samples


def model_config(args) -> ModelConfig:
    cfg = ModelConfig(backbone=BackboneConfig(out_channels=args.channels), laplacian_mode=args.laplacian_mode,
                      ema_theta=args.ema_theta, context_train=args.context_train, seed=args.seed, rg_seed=args.seed)
    cfg = dataclasses.replace(cfg, **parse_ablation(args.ablation))
    cfg.validate()
    return cfg


def train_config(args) -> TrainConfig:
    base = TrainConfig() if args.epochs is None else TrainConfig.scaled(args.epochs)
    overrides = {"seed": args.seed, "augment": args.augment}
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr is not None:
        overrides["lr"] = args.lr
    cfg = dataclasses.replace(base, **overrides)
    cfg.validate()
    return cfg


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_config(out: Path, command: str, **sections) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **sections}
    (out / "config.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _paths(args, *names):
    return {n: None if getattr(args, n) is None else str(Path(getattr(args, n)).resolve()) for n in names}


# -- reports --------------------------------------------------------------------------

def score_plot_svg(report, names) -> str:
    """Per-ROI panels: true and predicted scores, each min-max normalized, samples sorted by truth."""
    cols, pw, ph, pad = 6, 180, 120, 24
    rows = math.ceil(len(names) / cols)
    W, H = cols * pw, rows * ph + 30
    table = {}
    for row in report.score_table:
        table.setdefault(row["roi"], []).append((row["true_score"], row["predicted_score"]))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
             f'font-family="sans-serif" font-size="10">',
             '<rect width="100%" height="100%" fill="white"/>',
             '<text x="8" y="18" font-size="12">ROI scores vs ground truth (normalized); '
             'blue = truth, orange = predicted S*</text>']

    def norm(v):
        v = np.asarray(v, dtype=np.float64)
        span = np.ptp(v)
        return np.zeros_like(v) + 0.5 if span == 0 else (v - v.min()) / span

    for k, name in enumerate(names):
        pairs = sorted(table.get(name, []))
        x0, y0 = (k % cols) * pw + pad, 30 + (k // cols) * ph + 16
        w, h = pw - 2 * pad, ph - 40
        rho = report.roi_spearman.get(name, float("nan"))
        parts.append(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0}" y="{y0 - 4}">{escape(name)}  rho={rho:.3f}</text>')
        if len(pairs) < 2:
            continue
        xs = x0 + np.linspace(0, w, len(pairs))
        for series, color in ((norm([p[0] for p in pairs]), "#1f77b4"), (norm([p[1] for p in pairs]), "#ff7f0e")):
            pts = " ".join(f"{x:.1f},{y0 + h - v * h:.1f}" for x, v in zip(xs, series))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    _require(args, "out")
    out = Path(args.out)
    cfg = SynthConfig(count=args.count, seed=args.seed, image_size=args.image_size)
    schema = _schema(args)
    synth_generate(cfg, schema, out_dir=out)
    write_config(out, "synth", synth=cfg, seed=args.seed, paths=_paths(args, "schema", "out"))
    print(f"wrote {cfg.count} samples to {out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "manifest", "out")
    schema = _schema(args)
    samples = _samples(args, _existing(args.manifest, "manifest"))
    mcfg, tcfg = model_config(args), train_config(args)
    train_set, val_set = split(samples, args.val_fraction, args.seed) if args.val_fraction > 0 else (samples, [])
    out = Path(args.out)
    write_config(out, "train", model=mcfg, train=tcfg, seed=args.seed, val_fraction=args.val_fraction,
                 paths=_paths(args, "manifest", "schema", "scores", "out"),
                 split={"train": len(train_set), "val": len(val_set)})
    model = BoneAgeModel(mcfg, schema)
    rows = []

    def progress(row):
        rows.append(row)
        log.info("epoch %d  lr %.1e  loss %.3f  val_mad %s", row.epoch, row.lr, row.train_loss, row.val_mad)

    try:
        train(model, train_set, tcfg, val_samples=val_set or None, progress=progress)
    except TrainingAborted as exc:
        save_checkpoint(out / "checkpoint", model, extra={"train": tcfg.to_dict(), "aborted_epoch": exc.epoch})
        write_log_csv(out / "log.csv", rows)
        raise CliError(f"{exc}; last good checkpoint saved") from exc
    save_checkpoint(out / "checkpoint", model, extra={"train": tcfg.to_dict()})
    write_log_csv(out / "log.csv", rows)
    final = rows[-1] if rows else None
    summary = "no epochs run" if final is None else f"final train loss {final.train_loss:.4f}"
    if final is not None and final.val_mad is not None:
        summary += f", val MAD {final.val_mad:.4f}"
    print(summary)
    return 0


def _load_model(args):
    schema = load_roi_schema(args.schema) if args.schema else None
    return load_checkpoint(_existing(args.checkpoint, "checkpoint"), schema)


def cmd_eval(args) -> int:
    _require(args, "checkpoint", "manifest")
    model = _load_model(args)
    samples = _samples(args, _existing(args.manifest, "manifest"))
    report = evaluate(model, samples)
    print(f"MAD {report.mad:.6f}")
    if report.roi_spearman is not None:
        print(f"mean Spearman rho {report.mean_spearman:.6f}")
    if args.out is None:
        return 0
    out = Path(args.out)
    write_config(out, "eval", paths=_paths(args, "checkpoint", "manifest", "schema", "scores", "out"))
    doc = {"mad_months": report.mad, "count": report.count}
    if report.roi_spearman is not None:
        doc["roi_spearman"] = report.roi_spearman
        doc["mean_spearman"] = report.mean_spearman
        header = ["id", "roi", "true_score", "predicted_score", "raw_score"]
        rows = [[r[k] for k in header] for r in report.score_table]
        (out / "roi_scores.csv").write_text(_csv_text(header, rows))
        (out / "roi_scores.svg").write_text(score_plot_svg(report, model.schema.names))
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_predict(args) -> int:
    _require(args, "checkpoint", "manifest", "out")
    model = _load_model(args)
    samples = _samples(args, _existing(args.manifest, "manifest"))
    records = model.predict(samples)
    out = Path(args.out)
    write_config(out, "predict", paths=_paths(args, "checkpoint", "manifest", "schema", "out"))
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    (out / "predictions.jsonl").write_text("".join(line + "\n" for line in lines))
    print(f"wrote {len(records)} predictions")
    return 0


def cmd_ablate(args) -> int:
    _require(args, "manifest", "out")
    if args.ablation is not None:
        raise CliError("ablate runs all six configurations; --ablation does not apply")
    schema = _schema(args)
    samples = _samples(args, _existing(args.manifest, "manifest"))
    seeds = [int(s) for s in args.seeds.split(",")]
    mcfg, tcfg = model_config(args), train_config(args)
    train_set, val_set = split(samples, args.val_fraction or 0.2, args.seed)
    if not val_set:
        raise CliError("ablation needs a non-empty validation split")
    out = Path(args.out)
    write_config(out, "ablate", model=mcfg, train=tcfg, seeds=seeds, val_fraction=args.val_fraction or 0.2,
                 paths=_paths(args, "manifest", "schema", "out"))
    rows = run_ablation(train_set, val_set, mcfg, tcfg, seeds=seeds, schema=schema)
    header = ["exp", "label", "grouping", "pa", "ca", "mean_mad"] + [f"mad_seed{s}" for s in seeds]
    table = [[r.exp, r.label, r.grouping, int(r.use_pa), int(r.use_ca), repr(r.mean_mad)] + [repr(m) for m in r.mads]
             for r in rows]
    text = _csv_text(header, table)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model = _load_model(args)
    else:
        model = BoneAgeModel(model_config(args), _schema(args))
    counts = count_params(model)
    schema = model.schema
    graphs = build_graphs(schema, model.config.laplacian_mode)
    print("parameters")
    for key in ("backbone", "pab", "cab", "dgam", "head", "head_plus_dgam", "total"):
        print(f"  {key:<15}{counts[key]:>10}")
    print(f"schema  {schema.n} ROIs  hash {schema.hash()[:16]}")
    for g in schema.group_labels:
        print(f"  group {g}: {' '.join(schema.names[i] for i in schema.members(g))}")
    print(f"  joint graph edges: {int(graphs.adjacency[0].sum() // 2)}  "
          f"group graph edges: {int(graphs.adjacency[1].sum() // 2)}")
    print(f"  laplacian mode: {model.config.laplacian_mode}")
    if args.out is not None:
        write_config(Path(args.out), "inspect", model=model.config, parameters=counts,
                     paths=_paths(args, "checkpoint", "schema", "out"))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="JSON-lines sample manifest")
    common.add_argument("--schema", help="ROI schema JSON (default: built-in 17-ROI schema)")
    common.add_argument("--checkpoint", help="model checkpoint archive")
    common.add_argument("--out", help="output directory")
    common.add_argument("--scores", help="JSON-lines ground-truth score table to merge into the manifest")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--epochs", type=int, help="training epochs (decay milestones scale with it)")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--ablation", help="comma list from agconv|rgconv|shared, pa, ca")
    common.add_argument("--laplacian-mode", choices=("symmetric", "literal"), default="symmetric")
    common.add_argument("--ema-theta", type=float, default=0.01)
    common.add_argument("--context-train", choices=("ema", "sample"), default="ema")
    common.add_argument("--channels", type=int, default=64, help="backbone output channels C")
    common.add_argument("--augment", action="store_true", help="flip/rotate/blur during training")
    common.add_argument("--val-fraction", type=float, default=0.2)
    common.add_argument("--seeds", default="0,1,2", help="ablation seeds")
    common.add_argument("--count", type=int, default=64, help="synthetic sample count")
    common.add_argument("--image-size", type=int, default=512, help="synthetic image side")
    common.add_argument("--extended-ages", action="store_true", help="accept ages up to 240 months")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="boneage", description="ROI-scoring bone age regression")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"synth": "generate a synthetic dataset", "train": "train a model",
             "eval": "MAD report and score-consistency outputs", "predict": "write per-sample predictions",
             "ablate": "train the six ablation configurations", "inspect": "parameter counts and schema summary"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ManifestError, SchemaError, CheckpointError, archive.ArchiveError, OSError, ValueError) as exc:
        print(f"boneage {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
