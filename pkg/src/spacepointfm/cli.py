"""Command-line surface: gen, pretrain, scaling, adapt, eval, embed.

Every command is deterministic given its config snapshot and seeds; run
directories receive fixed file names (config.snapshot, loss.csv,
metrics.json, manifest.json).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .adapters import freeze_and_probe, random_frozen_backbone
from .config import ConfigError, load_config
from .eventio import iter_events, manifest_dict, read_events, write_events
from .eventgen import generate_events
from .geometry import NOISE_TRACK_ID
from .metrics import (
    ari,
    classification_report,
    double_majority,
    pca_project,
    spacepoint_counts,
)
from .serializer import PartitionGrid
from .training import (
    eval_classifier,
    eval_track_adapter,
    load_track_adapter,
    predict_classes,
    predict_tracks,
    pretrain,
    save_classifier,
    save_track_adapter,
    train_classifier,
    train_track_adapter,
)


class CliError(RuntimeError):
    pass


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _config_from_args(args):
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return load_config(getattr(args, "config", None), overrides=overrides)


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# -- gen -------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.values["gen.seed"] = args.seed
    if os.path.exists(args.out) and not args.force:
        raise CliError(f"{args.out} exists; pass --force to overwrite")
    if args.events < 0:
        raise CliError("--events must be >= 0")
    det = cfg.detector()
    params = cfg.gen_params()
    stats = write_events(args.out, generate_events(args.events, det, params))
    manifest = manifest_dict(stats, seed=cfg["gen.seed"])
    _write_json(args.out + ".manifest.json", manifest)
    print(json.dumps(manifest, indent=2))
    return 0


# -- pretrain ----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    events = read_events(args.data)
    summary = pretrain(events, cfg, args.out, resume=args.resume,
                       quiet=args.quiet)
    metrics = {"final_val_mse": summary["final_val_mse"],
               "best_val_mse": summary["best_val_mse"],
               "param_count": summary["param_count"]}
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    print(json.dumps(metrics, indent=2))
    return 0


# -- scaling -----------------------------------------------------------------


def cmd_scaling(args) -> int:
    cfg = _config_from_args(args)
    events = read_events(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.widths:
        widths = [int(w) for w in args.widths.split(",")]
        rows = []
        for width in widths:
            sub = _config_from_args(args)
            sub.values["model.d_model"] = width
            out_dir = os.path.join(args.out, f"width{width}")
            print(f"[scaling] width {width}", flush=True)
            summary = pretrain(events, sub, out_dir, quiet=args.quiet)
            rows.append((width, summary["param_count"], summary["final_val_mse"]))
        path = os.path.join(args.out, "scaling.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["width", "params", "val_mse"])
            writer.writerows(rows)
        print(format_table(["width", "params", "val_mse"],
                           [(w, p, f"{m:.6g}") for w, p, m in rows]))
    if args.fractions:
        fractions = [float(f) for f in args.fractions.split(",")]
        rows = []
        for fraction in fractions:
            sub = _config_from_args(args)
            sub.values["pretrain.data_fraction"] = fraction
            out_dir = os.path.join(args.out, f"fraction{fraction:g}")
            print(f"[scaling] data fraction {fraction:g}", flush=True)
            summary = pretrain(events, sub, out_dir, quiet=args.quiet)
            rows.append((fraction, summary["final_val_mse"]))
        path = os.path.join(args.out, "data_scaling.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fraction", "val_mse"])
            writer.writerows(rows)
        print(format_table(["fraction", "val_mse"],
                           [(f, f"{m:.6g}") for f, m in rows]))
    if not args.widths and not args.fractions:
        raise CliError("nothing to sweep: pass --widths and/or --fractions")
    return 0


# -- adapt -------------------------------------------------------------------


def _extractor_for(args, cfg, train_events):
    if args.backbone == "random":
        if args.grid:
            with open(args.grid, encoding="utf-8") as fh:
                grid = PartitionGrid.from_json(fh.read())
        else:
            from .serializer import fit_partition

            grid = fit_partition(train_events)
        backbone = random_frozen_backbone(cfg.model_config())
        return freeze_and_probe(backbone, grid)
    return freeze_and_probe(args.backbone)


def cmd_adapt(args) -> int:
    cfg = _config_from_args(args)
    events = read_events(args.data)
    if args.labels > len(events):
        raise CliError(f"--labels {args.labels} exceeds corpus size {len(events)}")
    train_events = events[:args.labels]
    if args.eval_data:
        eval_events = read_events(args.eval_data)
    else:
        eval_events = events[args.labels:]
    if not eval_events:
        raise CliError("no held-out events: shrink --labels or pass --eval-data")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.snapshot"), "w", encoding="utf-8") as fh:
        fh.write(cfg.snapshot_text())
    extractor = _extractor_for(args, cfg, train_events)

    if args.task == "track":
        adapter = train_track_adapter(train_events, extractor, cfg,
                                      steps=args.steps, quiet=args.quiet)
        metrics = eval_track_adapter(adapter, extractor, eval_events)
        save_track_adapter(os.path.join(args.out, "adapter.ckpt"), adapter,
                           extractor.checksum, {"task": "track"})
        predict = lambda event: predict_tracks(adapter, extractor, event)
    else:
        adapter = train_classifier(train_events, extractor, cfg, args.task,
                                   steps=args.steps, quiet=args.quiet)
        metrics = eval_classifier(adapter, extractor, eval_events, args.task)
        save_classifier(os.path.join(args.out, "adapter.ckpt"), adapter,
                        extractor.checksum, {"task": args.task})
        predict = lambda event: predict_classes(adapter, extractor, event)

    with open(os.path.join(args.out, "predictions.jsonl"), "w",
              encoding="utf-8") as fh:
        for event in eval_events:
            fh.write(json.dumps({"event_id": event.event_id,
                                 "labels": [int(v) for v in predict(event)]})
                     + "\n")
    metrics["task"] = args.task
    metrics["backbone"] = args.backbone
    metrics["labels"] = args.labels
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    print(json.dumps(metrics, indent=2))
    return 0


# -- eval --------------------------------------------------------------------


def _load_predictions(path) -> dict:
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            preds[int(doc["event_id"])] = np.asarray(doc["labels"], dtype=np.int64)
    return preds


def cmd_eval(args) -> int:
    preds = _load_predictions(args.pred)
    events = {e.event_id: e for e in iter_events(args.truth)}
    missing = sorted(set(events) - set(preds))
    extra = sorted(set(preds) - set(events))
    if missing or extra:
        raise CliError(f"event id mismatch: missing from predictions {missing[:10]}, "
                       f"unknown ids {extra[:10]}")
    for eid, labels in preds.items():
        if len(labels) != len(events[eid].points):
            raise CliError(f"event {eid}: {len(labels)} labels for "
                           f"{len(events[eid].points)} points")
    if args.task == "track":
        t_pool, p_pool = [], []
        t_off = p_off = 0
        tp = n_truth = n_pred = 0
        sp = [0, 0, 0]
        for eid in sorted(events):
            truth = events[eid].track_labels()
            pred = preds[eid]
            report = double_majority(truth, pred, noise_policy=args.noise_policy)
            tp += report.tp
            n_truth += report.n_truth
            n_pred += report.n_pred
            for i, v in enumerate(spacepoint_counts(truth=truth, pred=pred,
                                                    report=report,
                                                    noise_policy=args.noise_policy)):
                sp[i] += v
            keep = (truth != NOISE_TRACK_ID if args.noise_policy == "exclude"
                    else np.ones(len(truth), bool))
            t_pool.append(truth[keep] + t_off)
            p_pool.append(pred[keep] + p_off)
            t_off += int(truth.max()) + 2
            p_off += int(pred.max()) + 2
        metrics = {
            "task": "track",
            "ari": ari(np.concatenate(t_pool), np.concatenate(p_pool)),
            "efficiency": tp / n_truth if n_truth else 0.0,
            "purity": tp / n_pred if n_pred else 0.0,
            "spacepoint_efficiency": sp[0] / sp[1] if sp[1] else 0.0,
            "spacepoint_purity": sp[0] / sp[2] if sp[2] else 0.0,
            "tp": tp, "n_truth": n_truth, "n_pred": n_pred,
        }
        table = format_table(
            ["metric", "value"],
            [(k, f"{metrics[k]:.4f}") for k in
             ("ari", "efficiency", "purity", "spacepoint_efficiency",
              "spacepoint_purity")])
    else:
        n_classes = 5 if args.task == "pid" else 2
        y_true, y_pred = [], []
        for eid in sorted(events):
            event = events[eid]
            if args.task == "pid":
                y_true.append([int(p.pid_class) for p in event.points])
            else:
                y_true.append([int(p.is_noise) for p in event.points])
            y_pred.append(preds[eid])
        metrics = classification_report(np.concatenate(y_true),
                                        np.concatenate(y_pred), n_classes)
        metrics["task"] = args.task
        table = format_table(
            ["class", "support", "recall", "precision"],
            [(c["class"], c["support"], f"{c['recall']:.4f}",
              f"{c['precision']:.4f}") for c in metrics["per_class"]])
        table = (f"accuracy {metrics['accuracy']:.4f}  macro_recall "
                 f"{metrics['macro_recall']:.4f}  macro_precision "
                 f"{metrics['macro_precision']:.4f}\n" + table)
    print(json.dumps(metrics, indent=2))
    print(table)
    if args.out:
        _write_json(args.out, metrics)
    return 0


# -- embed -------------------------------------------------------------------


def cmd_embed(args) -> int:
    extractor = freeze_and_probe(args.backbone)
    decoder = None
    if args.adapter:
        decoder, _ = load_track_adapter(args.adapter)
        if decoder.d_in != extractor.d_out:
            raise CliError(f"adapter expects {decoder.d_in}-dim features but "
                           f"the backbone serves {extractor.d_out}")
    dims = args.pca
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["event_id", "point"]
        header += [f"raw_pc{i + 1}" for i in range(dims)]
        if decoder is not None:
            header += [f"proj_pc{i + 1}" for i in range(dims)]
        header += ["track", "pid", "noise"]
        writer.writerow(header)
        for event in iter_events(args.data):
            if len(event.points) < 2:
                continue
            feats, ser = extractor.features_for(event)
            raw_proj, _, _ = pca_project(feats, dims)
            if decoder is not None:
                emb = decoder.project(feats).data
                lin_proj, _, _ = pca_project(emb, dims)
            inv = np.empty(len(event.points), dtype=np.int64)
            inv[ser.order] = np.arange(len(event.points))
            truth = event.track_labels()
            for i, p in enumerate(event.points):
                row = [event.event_id, i]
                row += [f"{v:.6g}" for v in raw_proj[inv[i]]]
                if decoder is not None:
                    row += [f"{v:.6g}" for v in lin_proj[inv[i]]]
                row += [int(truth[i]), int(p.pid_class), int(p.is_noise)]
                writer.writerow(row)
    print(f"wrote {args.out}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spacepointfm",
        description="Spacepoint foundation-model pipeline: synthetic events, "
                    "raster-scan serialization, pretraining, frozen adapters.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("gen", help="generate a synthetic event corpus")
    p.add_argument("--events", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output JSONL path (.gz ok)")
    p.add_argument("--force", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="self-supervised backbone pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("scaling", help="width and data-size sweeps")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--widths", default=None, help="comma list, e.g. 16,32,64")
    p.add_argument("--fractions", default=None, help="comma list, e.g. 0.1,0.5,1.0")
    common(p)
    p.set_defaults(fn=cmd_scaling)

    p = sub.add_parser("adapt", help="train a frozen-backbone adapter")
    p.add_argument("--task", choices=("track", "pid", "noise"), required=True)
    p.add_argument("--backbone", required=True,
                   help="checkpoint path, or 'random' for the baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", type=int, required=True,
                   help="number of labeled training events")
    p.add_argument("--eval-data", default=None)
    p.add_argument("--grid", default=None,
                   help="partition grid JSON (for --backbone random)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="score prediction dumps against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--task", choices=("track", "pid", "noise"), required=True)
    p.add_argument("--noise-policy", choices=("exclude", "cluster"),
                   default="exclude")
    p.add_argument("--out", default=None, help="also write metrics JSON here")
    common(p, config=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="PCA embedding dumps for plotting")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pca", type=int, default=2)
    p.add_argument("--adapter", default=None,
                   help="track adapter for the post-projection view")
    p.add_argument("--out", required=True)
    common(p, config=False)
    p.set_defaults(fn=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
