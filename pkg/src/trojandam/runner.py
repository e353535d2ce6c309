"""Assemble and run one federated experiment from an :class:`ExperimentConfig`."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, engine
from .attacks import AttackConfig, Adversary
from .config import ExperimentConfig
from .datasets import (LabeledDataset, TriggerSpec, check_disjoint_labels, corner_stamp, dirichlet_partition,
                       load_idx, random_blend, synth_generate)
from .defenses import FoolsGold, MultiKrum, NormClipping, TrojanDam
from .fl import FLState, RoundConfig, TrainConfig, run_round
from .metrics import NEVER, compute_ba, compute_ma, effective_length

log = logging.getLogger(__name__)

CSV_COLUMNS = ["round", "ma", "ba", "gamma", "norm_min", "norm_mean", "norm_max", "adversary", "dropped",
               "td_ratio", "td_loss_first", "td_loss_last", "krum_selected", "fg_weights", "wall_time"]
TIMING_COLUMNS = ("wall_time",)
FINAL_WINDOW = 20


@dataclass
class Experiment:
    cfg: ExperimentConfig
    train: LabeledDataset
    test: LabeledDataset
    ood: LabeledDataset
    clients: list
    model: engine.Model
    trigger: Optional[TriggerSpec]
    adversary: Optional[Adversary]
    hook: object
    round_cfg: RoundConfig
    train_cfg: TrainConfig


def load_main_data(cfg: ExperimentConfig):
    d = cfg.data
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xda7a]))
    if d.kind == "synthetic":
        full = synth_generate(d.classes, d.per_class, d.image_size, seed=d.seed + 7919 * cfg.seed,
                              channels=d.channels, noise=d.noise)
        return full.split(d.test_fraction, rng)
    train = load_idx(d.images, d.labels)
    if d.test_images:
        return train, load_idx(d.test_images, d.test_labels)
    return train.split(d.test_fraction, rng)


def load_ood(cfg: ExperimentConfig, like: LabeledDataset) -> LabeledDataset:
    o = cfg.ood
    if o.kind == "synthetic":
        c, h, _ = like.images.shape[1:]
        return synth_generate(o.classes, o.per_class, h, seed=o.seed + 7919 * cfg.seed, channels=c,
                              label_offset=o.label_offset, noise=o.noise)
    return load_idx(o.images, o.labels)


def make_trigger(cfg: ExperimentConfig, image_shape) -> TriggerSpec:
    a = cfg.attack
    c, h, w = image_shape
    if a.trigger in ("blended", "tact"):
        t = random_blend(image_shape, a.target, a.blend_alpha, seed=4242)
        if a.trigger == "tact":
            t.source_classes = (a.source_class,)
        return t
    if a.trigger == "pixel-pattern":
        return corner_stamp(c, a.stamp_size, a.target, (h - a.stamp_size, w - a.stamp_size))
    return TriggerSpec("subpopulation", a.target, subpopulation=tuple(a.subpopulation))


def make_hook(cfg: ExperimentConfig, ood: LabeledDataset, label_space):
    df = cfg.defense
    if df.name == "trojandam":
        return TrojanDam(ood_pool=ood.images, label_space=label_space, flood_size=df.flood_size,
                         shadow_size=df.shadow_size, shadow_pool=df.shadow_pool or None, ratio=df.ratio,
                         prox_lambda=df.prox_lambda, epochs=df.epochs, lr=df.lr, batch_size=df.batch_size,
                         start_round=df.start_round, score_mode=df.score_mode, clip=df.clip,
                         clip_bound=cfg.fl.clip_bound or None, seed=cfg.seed)
    if df.name == "multikrum":
        return MultiKrum(f=df.krum_f, m=df.krum_m or None, clip=df.clip, clip_bound=cfg.fl.clip_bound or None)
    if df.name == "foolsgold":
        return FoolsGold(floor=df.fg_floor, clip=df.clip, clip_bound=cfg.fl.clip_bound or None)
    return NormClipping(clip=df.clip, clip_bound=cfg.fl.clip_bound or None)


def build(cfg: ExperimentConfig) -> Experiment:
    train, test = load_main_data(cfg)
    ood = load_ood(cfg, train)
    check_disjoint_labels(train, ood)
    plan = dirichlet_partition(train, cfg.fl.total_clients, cfg.data.alpha, cfg.seed)
    clients = [train.subset(idx) for idx in plan.clients]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1417]))
    c, h, w = train.images.shape[1:]
    spec = engine.small_cnn(c, len(train.label_space), h, tuple(cfg.model.widths))
    model = engine.init_model(spec, rng, train.mean, train.std)
    trigger = None
    adversary = None
    if cfg.attack.enabled:
        a = cfg.attack
        trigger = make_trigger(cfg, (c, h, w))
        trigger.validate((c, h, w), train.label_space)
        acfg = AttackConfig(algorithm=a.algorithm, trigger=trigger, plr=a.plr, poison_fraction=a.poison_fraction,
                            epochs=a.epochs, batch_size=a.batch_size, start=a.start, end=a.end,
                            colluders=a.colluders, dba_parts=a.dba_parts, pgd_radius=a.pgd_radius,
                            neurotoxin_k=a.neurotoxin_k, mask_per_step=a.mask_per_step, scale=a.scale,
                            avoid_key_kernels=a.avoid_key_kernels, avoid_ratio=a.avoid_ratio)
        # adversarial clients: the largest partitions, so every colluder has data to poison
        order = np.argsort([-len(cl) for cl in clients], kind="stable")
        ids = sorted(int(i) for i in order[:a.colluders])
        adv_ood = synth_generate(cfg.ood.classes, max(cfg.ood.per_class // 2, 20), h,
                                 seed=cfg.ood.seed + 31337 + cfg.seed, channels=c,
                                 label_offset=cfg.ood.label_offset) if a.avoid_key_kernels else None
        adversary = Adversary(acfg, ids, adv_ood, train.label_space, seed=cfg.seed)
    hook = make_hook(cfg, ood, train.label_space)
    round_cfg = RoundConfig(cfg.fl.total_clients, cfg.fl.per_round, cfg.seed, cfg.defense.clip,
                            cfg.fl.clip_bound or None)
    t = cfg.train
    train_cfg = TrainConfig(t.lr, t.epochs, t.batch_size, t.weight_decay)
    return Experiment(cfg, train, test, ood, clients, model, trigger, adversary, hook, round_cfg, train_cfg)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(round(v, 6))
    return str(v)


def _as_written(v: float) -> float:
    return float(_fmt(v)) if v == v else float("nan")


def summarize(rows: list, attack_start: Optional[int]) -> dict:
    """Final-window means and effective length; recomputable from the CSV alone."""
    ma = [r["ma"] for r in rows if r["ma"] == r["ma"]]
    ba_rows = [r for r in rows if r["ba"] == r["ba"]]
    ba = [r["ba"] for r in ba_rows]
    out = {"rounds": len(rows),
           "final_ma": float(np.mean(ma[-FINAL_WINDOW:])) if ma else None,
           "final_ba": float(np.mean(ba[-FINAL_WINDOW:])) if ba else None}
    if ba_rows and attack_start is not None:
        out["effective_length"] = effective_length(ba, 35.0, attack_start, ba_rows[0]["round"])
    return out


def read_metrics(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"round": int(r["round"]), "ma": float(r["ma"]) if r["ma"] else float("nan"),
                         "ba": float(r["ba"]) if r["ba"] else float("nan")})
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress: bool = False, keep_model: bool = False) -> dict:
    """Run every round, stream metrics to CSV, write a checkpoint and summary."""
    exp = build(cfg)
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    state = FLState(0, exp.model, exp.clients, cfg.seed)
    rows = []
    cache = {}
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for t in range(cfg.rounds):
            state, m = run_round(state, exp.round_cfg, exp.train_cfg, exp.adversary, exp.hook, cfg.workers)
            if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
                m.ma = compute_ma(state.model, exp.test)
                if exp.trigger is not None:
                    m.ba = compute_ba(state.model, exp.test, exp.trigger, cache)
            row = {"round": m.round, "ma": m.ma, "ba": m.ba, "gamma": m.gamma, "norm_min": m.norm_min,
                   "norm_mean": m.norm_mean, "norm_max": m.norm_max, "adversary": m.adversary,
                   "dropped": m.dropped, "wall_time": m.wall_time, **m.diagnostics}
            writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
            fh.flush()
            # the summary is built from the values as written, so the CSV alone reproduces it
            rows.append({"round": m.round, "ma": _as_written(m.ma), "ba": _as_written(m.ba)})
            if progress and (t + 1) % max(cfg.rounds // 20, 1) == 0:
                log.info("round %d  MA %.2f  BA %.2f", t, m.ma, m.ba)
    checkpoint.save(out / "final.tdam", state.model)
    summary = summarize(rows, cfg.attack.start if cfg.attack.enabled else None)
    summary["name"] = cfg.name
    summary["seed"] = cfg.seed
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if keep_model:
        summary["model"] = state.model
        summary["rows"] = rows
    return summary
