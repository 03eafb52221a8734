"""Training loops: self-supervised pretraining of the backbone and
frozen-backbone adapter training, plus their pooled evaluations.

Batching is stateless: the event indices of step t are a pure function of
(shuffle seed, t), so an interrupted run resumed from its checkpoint replays
the identical stream.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import (
    FrozenFeatures,
    PointClassifier,
    TrackDecoder,
    truth_masks_for,
)
from .backbone import Backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .geometry import Event
from .metrics import ari, classification_report, double_majority, spacepoint_counts
from .objective import (
    DifficultyBins,
    KnnTargets,
    build_targets,
    fit_difficulty_bins,
    knn_loss,
)
from .serializer import PartitionGrid, fit_partition, serialize


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedEvent:
    event_id: int
    feats: np.ndarray          # (S, 4) float32, serialized order
    pe: np.ndarray             # (S, pe_dim) float32 positional encoding
    targets: KnnTargets        # reordered to match feats
    difficulty: float


def prepare_events(events, grid: PartitionGrid, k: int,
                   pe_levels: int = 6) -> list[PreparedEvent]:
    """Serialize, encode positions, and build neighbor targets once per event."""
    from .geometry import positional_encoding

    out = []
    for event in events:
        if len(event) == 0:
            continue
        ser = serialize(event, grid)
        feats = event.features()[ser.order].astype(np.float32)
        pe = positional_encoding(feats[:, 1:].astype(np.float64),
                                 pe_levels).astype(np.float32)
        targets = build_targets(event, k=k).reordered(ser.order)
        out.append(PreparedEvent(event.event_id, feats, pe, targets,
                                 targets.mean_knn_distance))
    return out


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))
    if n >= batch_size:
        return rng.choice(n, size=batch_size, replace=False)
    return rng.choice(n, size=batch_size, replace=True)


def _mean_val_loss(model: Backbone, prepared: list[PreparedEvent]) -> float:
    """Unweighted mean neighbor-regression MSE; forward only."""
    if not prepared:
        return math.nan
    losses = []
    for rec in prepared:
        pred = model.forward(rec.feats, pe=rec.pe)
        loss, skipped = knn_loss(pred, rec.targets)
        if not skipped:
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else math.nan


def _jsonable(values: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in values.items()}


def _checkpoint_tensors(model: Backbone, opt: T.AdamW) -> dict:
    tensors = {name: w.data for name, w in model.weights.items()}
    for name, arr in opt.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in opt.v.items():
        tensors[f"opt.v.{name}"] = arr
    return tensors


def pretrain(events: list[Event], cfg: RunConfig, out_dir: str,
             resume: str | None = None, quiet: bool = False) -> dict:
    """Full self-supervised loop; writes grid/bins/loss.csv/checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.snapshot"), "w", encoding="utf-8") as fh:
        fh.write(cfg.snapshot_text())

    n_events = len(events)
    if n_events < 2:
        raise TrainingError("need at least 2 events to split train/val")
    val_fraction = cfg["pretrain.val_fraction"]
    n_val = max(1, int(round(val_fraction * n_events))) if val_fraction > 0 else 0
    train_events = events[:n_events - n_val]
    val_events = events[n_events - n_val:]
    fraction = cfg["pretrain.data_fraction"]
    if not 0 < fraction <= 1:
        raise TrainingError("pretrain.data_fraction must lie in (0, 1]")
    n_used = max(1, int(round(fraction * len(train_events))))
    train_events = train_events[:n_used]

    model_cfg = cfg.model_config()
    if resume is not None:
        tensors, metadata = load_checkpoint(resume)
        grid = PartitionGrid.from_dict(metadata["grid"])
        bins = DifficultyBins.from_dict(metadata["bins"])
    else:
        grid = fit_partition(train_events, sample_seed=cfg["gen.seed"])
        metadata = None

    train_prep = prepare_events(train_events, grid, model_cfg.k,
                                pe_levels=model_cfg.pe_levels)
    val_prep = prepare_events(val_events, grid, model_cfg.k,
                              pe_levels=model_cfg.pe_levels)
    if resume is None:
        if len(train_prep) >= 100:
            bins = fit_difficulty_bins([r.targets for r in train_prep],
                                       n_bins=cfg["pretrain.difficulty_bins"])
        else:
            # too small to calibrate; single bin, unit weight
            bins = DifficultyBins(edges=np.zeros(0), weights=np.ones(1))
    with open(os.path.join(out_dir, "grid.json"), "w", encoding="utf-8") as fh:
        fh.write(grid.to_json())
    with open(os.path.join(out_dir, "bins.json"), "w", encoding="utf-8") as fh:
        fh.write(bins.to_json())

    s_opt = cfg.section("optim")
    total_steps = s_opt["total_steps"]
    with T.using(dtype=np.float32, mode="train"):
        model = Backbone.init(model_cfg, dtype=np.float32)
        opt = T.AdamW(model.weights, lr_mults=model.lr_mults,
                      beta1=s_opt["beta1"], beta2=s_opt["beta2"],
                      eps=s_opt["eps"], weight_decay=s_opt["weight_decay"])
        start_step = 0
        best_val = math.inf
        if resume is not None:
            for name, w in model.weights.items():
                w.data = tensors[name].astype(np.float32)
            opt.load_state_dict({
                "step_count": metadata["train_state"]["opt_step_count"],
                "m": {n: tensors[f"opt.m.{n}"] for n in model.weights},
                "v": {n: tensors[f"opt.v.{n}"] for n in model.weights},
            })
            start_step = metadata["train_state"]["step"]
            best_val = metadata["train_state"].get("best_val", math.inf)

        stop_after = cfg["pretrain.stop_after"]
        last_step = min(total_steps, stop_after) if stop_after else total_steps
        log_path = os.path.join(out_dir, "loss.csv")
        log_mode = "a" if resume is not None else "w"
        shuffle_seed = cfg["pretrain.shuffle_seed"]
        log_every = max(1, cfg["pretrain.log_every"])
        val_every = max(1, cfg["pretrain.val_every"])
        history = []
        with open(log_path, log_mode, newline="", encoding="utf-8") as log_fh:
            writer = csv.writer(log_fh)
            if resume is None:
                writer.writerow(["step", "lr", "train_loss", "val_mse"])
            for step in range(start_step + 1, last_step + 1):
                lr = T.lr_schedule(step, s_opt["warmup_steps"], total_steps,
                                   s_opt["peak_lr"])
                idx = batch_indices(shuffle_seed, step, len(train_prep),
                                    s_opt["batch_size"])
                opt.zero_grad()
                batch_loss = 0.0
                batch_ids = []
                for i in idx:
                    rec = train_prep[int(i)]
                    batch_ids.append(rec.event_id)
                    with T.Tape() as tape:
                        pred = model.forward(rec.feats, pe=rec.pe)
                        loss, skipped = knn_loss(pred, rec.targets)
                        if skipped:
                            continue
                        weighted = T.scale(
                            loss, bins.weight_of(rec.difficulty) / len(idx))
                    tape.backward(weighted)
                    batch_loss += weighted.item()
                if not math.isfinite(batch_loss):
                    dump = {"step": step, "lr": lr, "event_ids": batch_ids,
                            "batch_loss": batch_loss}
                    with open(os.path.join(out_dir, "nan_dump.json"), "w",
                              encoding="utf-8") as fh:
                        json.dump(dump, fh, indent=2)
                    raise TrainingError(
                        f"non-finite loss at step {step}; diagnostics in nan_dump.json")
                T.clip_grad_norm(list(model.weights.values()), s_opt["clip_norm"])
                opt.step(lr)

                val_mse = ""
                if val_prep and (step % val_every == 0 or step == last_step):
                    val_mse = _mean_val_loss(model, val_prep)
                    if val_mse < best_val:
                        best_val = val_mse
                        _save_backbone(os.path.join(out_dir, "best.ckpt"), model,
                                       opt, cfg, grid, bins, step, best_val)
                if step % log_every == 0 or step == last_step or val_mse != "":
                    writer.writerow([step, f"{lr:.8g}", f"{batch_loss:.8g}",
                                     f"{val_mse:.8g}" if val_mse != "" else ""])
                    log_fh.flush()
                    history.append((step, lr, batch_loss,
                                    val_mse if val_mse != "" else None))
                if not quiet and step % (log_every * 10) == 0:
                    print(f"  step {step}/{last_step} lr {lr:.2e} "
                          f"loss {batch_loss:.5f}", flush=True)

        final_val = _mean_val_loss(model, val_prep) if val_prep else math.nan
        _save_backbone(os.path.join(out_dir, "final.ckpt"), model, opt, cfg,
                       grid, bins, last_step, best_val)
    return {"final_val_mse": final_val, "best_val_mse": best_val,
            "param_count": model.param_count(),
            "checkpoint": os.path.join(out_dir, "final.ckpt"),
            "history": history, "model": model, "grid": grid, "bins": bins}


def _save_backbone(path, model, opt, cfg, grid, bins, step, best_val) -> None:
    metadata = {
        "kind": "backbone",
        "config": model.config.to_dict(),
        "grid": grid.to_dict(),
        "bins": bins.to_dict(),
        "seed": model.config.seed,
        "run_config": _jsonable(cfg.values),
        "train_state": {"step": step, "opt_step_count": opt.step_count,
                        "best_val": best_val},
    }
    save_checkpoint(path, _checkpoint_tensors(model, opt), metadata)


# -- adapters ------------------------------------------------------------


def _adapter_lr_loop(params, steps, warmup, peak, clip, step_fn, quiet=True,
                     beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    opt = T.AdamW(params, beta1=beta1, beta2=beta2, eps=eps,
                  weight_decay=weight_decay)
    for step in range(1, steps + 1):
        lr = T.lr_schedule(step, warmup, steps, peak)
        opt.zero_grad()
        loss = step_fn(step)
        T.clip_grad_norm([p for _, p in opt.params], clip)
        opt.step(lr)
        if not quiet and step % 50 == 0:
            print(f"  adapter step {step}/{steps} loss {loss:.5f}", flush=True)
    return opt


def train_track_adapter(train_events: list[Event], extractor: FrozenFeatures,
                        cfg: RunConfig, steps: int | None = None,
                        quiet: bool = True) -> TrackDecoder:
    s = cfg.section("track")
    steps = steps if steps is not None else s["steps"]
    warmup = min(s["warmup_steps"], max(1, steps // 5))
    tcfg = cfg.track_config()
    with T.using(dtype=np.float32, mode="train"):
        decoder = TrackDecoder(extractor.d_out, tcfg, dtype=np.float32)
        batch = s["batch_size"]
        shuffle_seed = cfg["pretrain.shuffle_seed"] + 101

        def step_fn(step):
            idx = batch_indices(shuffle_seed, step, len(train_events), batch)
            total = 0.0
            for i in idx:
                event = train_events[int(i)]
                feats, ser = extractor.features_for(event)
                masks = truth_masks_for(event, ser.order)
                with T.Tape() as tape:
                    loss, _, _ = decoder.loss(feats, masks)
                    scaled = T.scale(loss, 1.0 / len(idx))
                tape.backward(scaled)
                total += scaled.item()
            if not math.isfinite(total):
                raise TrainingError(f"non-finite adapter loss at step {step}")
            return total

        _adapter_lr_loop(decoder.weights, steps, warmup, s["lr"],
                         cfg["optim.clip_norm"], step_fn, quiet=quiet,
                         weight_decay=cfg["optim.weight_decay"])
    extractor.verify_frozen()
    return decoder


def predict_tracks(decoder: TrackDecoder, extractor: FrozenFeatures,
                   event: Event) -> np.ndarray:
    """Per-point predicted track index in the event's original point order."""
    feats, ser = extractor.features_for(event)
    pred = decoder.predict(feats)
    labels = np.empty(len(event.points), dtype=np.int64)
    labels[ser.order] = pred.labels
    return labels


def eval_track_adapter(decoder: TrackDecoder, extractor: FrozenFeatures,
                       events: list[Event], noise_policy="exclude") -> dict:
    """Pooled test-set metrics: ARI over all points, efficiency/purity over
    all tracks, spacepoint-level efficiency/purity over all points."""
    t_pool, p_pool = [], []
    t_off = p_off = 0
    tp = n_truth = n_pred = 0
    sp_num = sp_eff_den = sp_pur_den = 0
    for event in events:
        truth = event.track_labels()
        pred = predict_tracks(decoder, extractor, event)
        report = double_majority(truth, pred, noise_policy=noise_policy)
        tp += report.tp
        n_truth += report.n_truth
        n_pred += report.n_pred
        num, eff_den, pur_den = spacepoint_counts(report, truth, pred,
                                                  noise_policy=noise_policy)
        sp_num += num
        sp_eff_den += eff_den
        sp_pur_den += pur_den
        keep = truth >= 0 if noise_policy == "exclude" else np.ones(len(truth), bool)
        t_pool.append(truth[keep] + t_off)
        p_pool.append(pred[keep] + p_off)
        t_off += int(truth.max()) + 2
        p_off += int(pred.max()) + 2
    pooled_t = np.concatenate(t_pool)
    pooled_p = np.concatenate(p_pool)
    return {
        "ari": ari(pooled_t, pooled_p),
        "efficiency": tp / n_truth if n_truth else 0.0,
        "purity": tp / n_pred if n_pred else 0.0,
        "spacepoint_efficiency": sp_num / sp_eff_den if sp_eff_den else 0.0,
        "spacepoint_purity": sp_num / sp_pur_den if sp_pur_den else 0.0,
        "tp": tp, "n_truth": n_truth, "n_pred": n_pred,
        "n_events": len(events),
    }


def _task_labels(event: Event, task: str) -> np.ndarray:
    if task == "pid":
        return np.array([int(p.pid_class) for p in event.points], dtype=np.int64)
    if task == "noise":
        return np.array([int(p.is_noise) for p in event.points], dtype=np.int64)
    raise ValueError(f"unknown classification task {task!r}")


def train_classifier(train_events: list[Event], extractor: FrozenFeatures,
                     cfg: RunConfig, task: str, steps: int | None = None,
                     quiet: bool = True) -> PointClassifier:
    n_classes = 5 if task == "pid" else 2
    s = cfg.section("classifier")
    steps = steps if steps is not None else s["steps"]
    warmup = min(s["warmup_steps"], max(1, steps // 5))
    ccfg = cfg.classifier_config(n_classes)
    with T.using(dtype=np.float32, mode="train"):
        clf = PointClassifier(extractor.d_out, ccfg, dtype=np.float32)
        batch = s["batch_size"]
        shuffle_seed = cfg["pretrain.shuffle_seed"] + 202

        def step_fn(step):
            idx = batch_indices(shuffle_seed, step, len(train_events), batch)
            total = 0.0
            for i in idx:
                event = train_events[int(i)]
                feats, ser = extractor.features_for(event)
                labels = _task_labels(event, task)[ser.order]
                with T.Tape() as tape:
                    loss = clf.loss(feats, labels)
                    scaled = T.scale(loss, 1.0 / len(idx))
                tape.backward(scaled)
                total += scaled.item()
            if not math.isfinite(total):
                raise TrainingError(f"non-finite classifier loss at step {step}")
            return total

        _adapter_lr_loop(clf.weights, steps, warmup, s["lr"],
                         cfg["optim.clip_norm"], step_fn, quiet=quiet,
                         weight_decay=cfg["optim.weight_decay"])
    extractor.verify_frozen()
    return clf


def predict_classes(clf: PointClassifier, extractor: FrozenFeatures,
                    event: Event) -> np.ndarray:
    feats, ser = extractor.features_for(event)
    labels = np.empty(len(event.points), dtype=np.int64)
    labels[ser.order] = clf.predict(feats)
    return labels


def eval_classifier(clf: PointClassifier, extractor: FrozenFeatures,
                    events: list[Event], task: str) -> dict:
    y_true, y_pred = [], []
    for event in events:
        y_true.append(_task_labels(event, task))
        y_pred.append(predict_classes(clf, extractor, event))
    report = classification_report(np.concatenate(y_true),
                                   np.concatenate(y_pred),
                                   5 if task == "pid" else 2)
    report["n_events"] = len(events)
    return report


def save_track_adapter(path, decoder: TrackDecoder, backbone_checksum: str,
                       extra: dict | None = None) -> None:
    metadata = {"kind": "track_adapter", "d_in": decoder.d_in,
                "adapter_config": decoder.config.to_dict(),
                "backbone_checksum": backbone_checksum}
    metadata.update(extra or {})
    save_checkpoint(path, {n: w.data for n, w in decoder.weights.items()},
                    metadata)


def load_track_adapter(path) -> tuple[TrackDecoder, dict]:
    from .adapters import TrackDecoderConfig

    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "track_adapter":
        raise TrainingError(f"{path} is not a track adapter checkpoint")
    decoder = TrackDecoder(metadata["d_in"],
                           TrackDecoderConfig.from_dict(metadata["adapter_config"]),
                           dtype=np.float32)
    for name, w in decoder.weights.items():
        w.data = tensors[name].astype(np.float32)
    return decoder, metadata


def save_classifier(path, clf: PointClassifier, backbone_checksum: str,
                    extra: dict | None = None) -> None:
    metadata = {"kind": "classifier", "d_in": clf.d_in,
                "adapter_config": clf.config.to_dict(),
                "backbone_checksum": backbone_checksum}
    metadata.update(extra or {})
    save_checkpoint(path, {n: w.data for n, w in clf.weights.items()}, metadata)


def load_classifier(path) -> tuple[PointClassifier, dict]:
    from .adapters import ClassifierConfig

    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "classifier":
        raise TrainingError(f"{path} is not a classifier checkpoint")
    clf = PointClassifier(metadata["d_in"],
                          ClassifierConfig.from_dict(metadata["adapter_config"]),
                          dtype=np.float32)
    for name, w in clf.weights.items():
        w.data = tensors[name].astype(np.float32)
    return clf, metadata
