"""Representation probes, the mot-vs-shared interference experiment and evaluation metrics."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .action_flow import Trajectory, sample_trajectory, trajectory_metrics
from .model import DrivingModel, ModelConfig, caption_batch, caption_nll, general_sentences, scene_batch
from .perception import PerceptionTargets, chamfer_matrix
from .perception.banks import build_instance_banks
from .training import default_plan, run_stage, with_ema
from .vocab import Vocabulary

DET_THRESHOLDS = (0.5, 1.0, 2.0)
MAP_THRESHOLDS = (0.5, 1.0)
GENERAL_EVAL_SEED = 10_007       # held-out generic sentences for the forgetting slice


class ProbeDisabledError(RuntimeError):
    pass


class IncomparableConfigsError(ValueError):
    pass


@dataclass
class ProbeRecord:
    layer: int
    cos_und_per: float
    cos_und_act: float
    config: str = "mot"
    seed: int = 0
    step: int = 0
    degenerate: bool = False


def cosine(v: np.ndarray, w: np.ndarray) -> tuple[float, bool]:
    """Cosine of two vectors; a zero vector gives ``(0.0, True)``."""
    v, w = np.asarray(v, dtype=np.float64).ravel(), np.asarray(w, dtype=np.float64).ravel()
    nv, nw = np.linalg.norm(v), np.linalg.norm(w)
    if nv == 0.0 or nw == 0.0:
        return 0.0, True
    return float(np.clip(v @ w / (nv * nw), -1.0, 1.0)), False


def _pooled_cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    # mean-pool the tokens of each example, then average the per-example cosines
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        return 0.0, True
    pa, pb = a.mean(axis=-2).reshape(-1, a.shape[-1]), b.mean(axis=-2).reshape(-1, b.shape[-1])
    vals = [cosine(x, y) for x, y in zip(pa, pb)]
    return float(np.mean([c for c, _ in vals])), any(d for _, d in vals)


def group_cosine(snapshots: dict | None, config: str = "mot", seed: int = 0, step: int = 0) -> list[ProbeRecord]:
    """Per-layer cosine of mean-pooled understanding tokens against perception and action tokens."""
    if not snapshots or not snapshots.get("und"):
        raise ProbeDisabledError("forward ran without probe snapshots")
    out = []
    for i, und in enumerate(snapshots["und"]):
        cp, dp = _pooled_cosine(und, snapshots["per"][i])
        ca, da = _pooled_cosine(und, snapshots["act"][i])
        out.append(ProbeRecord(i + 1, cp, ca, config, seed, step, dp or da))
    return out


# --- metrics ------------------------------------------------------------------------------

def _matched(allowed: np.ndarray) -> int:
    """Size of a maximum matching in a boolean compatibility matrix."""
    if allowed.size == 0:
        return 0
    r, c = linear_sum_assignment(-allowed.astype(np.float64))
    return int(allowed[r, c].sum())


def detection_score(pred_boxes, pred_classes, gt_agents, thresholds=DET_THRESHOLDS) -> float:
    """Mean over thresholds of matched / max(#pred, #gt) with same-class centre distance <= t.

    ``pred_boxes`` / ``pred_classes`` / ``gt_agents`` are per-scene lists of
    confident predictions ``(n, >=2)``, their classes and ground-truth rows.
    """
    scores = []
    for t in thresholds:
        hit = total = 0
        for pb, pc, ga in zip(pred_boxes, pred_classes, gt_agents):
            pb, ga = np.asarray(pb, dtype=np.float64), np.asarray(ga)
            n_p, n_g = len(pb), len(ga)
            total += max(n_p, n_g)
            if n_p and n_g:
                dist = np.linalg.norm(pb[:, None, :2] - ga[None, :, :2], axis=-1)
                same = np.asarray(pc)[:, None] == ga[None, :, 7].astype(int)
                hit += _matched((dist <= t) & same)
        scores.append(1.0 if total == 0 else hit / total)
    return float(np.mean(scores))


def map_score(pred_pts, pred_classes, gt_lanes, gt_classes, thresholds=MAP_THRESHOLDS) -> float:
    """Like :func:`detection_score` with Chamfer distance between polylines."""
    scores = []
    for t in thresholds:
        hit = total = 0
        for pp, pc, gl, gc in zip(pred_pts, pred_classes, gt_lanes, gt_classes):
            n_p, n_g = len(pp), len(gl)
            total += max(n_p, n_g)
            if n_p and n_g:
                dist = chamfer_matrix(np.asarray(pp), np.asarray(gl))
                same = np.asarray(pc)[:, None] == np.asarray(gc)[None, :]
                hit += _matched((dist <= t) & same)
        scores.append(1.0 if total == 0 else hit / total)
    return float(np.mean(scores))


def _softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def perception_predictions(out, conf: float = 0.5) -> dict:
    """Confident detections and polylines per scene, decoded from raw outputs."""
    res = {"boxes": [], "box_cls": [], "lanes": [], "lane_cls": []}
    if out.det_logits is not None:
        p = _softmax(out.det_logits.data)
        boxes = out.boxes()
        for b in range(p.shape[0]):
            keep = p[b, :, -1] < 1.0 - conf
            res["boxes"].append(boxes[b][keep])
            res["box_cls"].append(p[b, keep, :-1].argmax(-1))
    if out.map_logits is not None:
        p = _softmax(out.map_logits.data)
        for b in range(p.shape[0]):
            keep = p[b, :, -1] < 1.0 - conf
            res["lanes"].append(out.map_pts.data[b][keep])
            res["lane_cls"].append(p[b, keep, :-1].argmax(-1))
    return res


def caption_loss(model: DrivingModel, items, batch: int = 16) -> float:
    """Mean next-token NLL over ``items`` (scenes for driving captions, strings for generic text)."""
    total = count = 0.0
    for i in range(0, len(items), batch):
        chunk = items[i:i + batch]
        b = caption_batch(chunk, model.vocab, model.cfg)
        res = model.forward(b, with_per=False, with_act=False)
        total += float(caption_nll(res.logits, res.token_ids, model.vocab.pad).data) * len(chunk)
        count += len(chunk)
    return total / max(count, 1.0)


def general_slice(n: int = 64) -> list[str]:
    return general_sentences(n, GENERAL_EVAL_SEED)


def evaluate(model: DrivingModel, scenes, euler_steps: int = 10, seed: int = 0, batch: int = 8) -> dict:
    """Planning, perception and language metrics over ``scenes`` (read-only on the model)."""
    l2 = {k: [] for k in ("l2_1s", "l2_2s", "l2_3s", "avg_l2")}
    coll, occ_hits, occ_cells = [], 0, 0
    preds = {"boxes": [], "box_cls": [], "lanes": [], "lane_cls": []}
    for i in range(0, len(scenes), batch):
        chunk = scenes[i:i + batch]
        b = scene_batch(chunk, model.vocab, model.cfg)
        trajs = sample_trajectory(model.velocity_field(b), euler_steps, seed=[seed, i],
                                  shape=(len(chunk), model.cfg.horizon, 2))
        for s, tr in zip(chunk, trajs):
            m = trajectory_metrics(tr, Trajectory(s.expert_trajectory), s.occupancy)
            for k in l2:
                l2[k].append(getattr(m, k))
            coll.append(m.collision)
        out = model.forward(b, with_act=False).perception
        for k, v in perception_predictions(out).items():
            preds[k].extend(v)
        if out.occupancy is not None:
            tgt = PerceptionTargets.from_scenes(chunk, model.cfg.perception.occ_grid).occupancy
            occ_hits += int(((out.occupancy.data.reshape(tgt.shape) > 0) == (tgt > 0.5)).sum())
            occ_cells += tgt.size
    metrics = {k: float(np.mean(v)) for k, v in l2.items()}
    metrics["collision_rate"] = 100.0 * float(np.mean(coll))
    if preds["boxes"]:
        metrics["det_score"] = detection_score(preds["boxes"], preds["box_cls"], [s.agents for s in scenes])
    if preds["lanes"]:
        metrics["map_score"] = map_score(preds["lanes"], preds["lane_cls"], [s.lanes for s in scenes],
                                         [s.lane_classes for s in scenes])
    if occ_cells:
        metrics["occ_accuracy"] = occ_hits / occ_cells
    metrics["caption_ppl"] = float(np.exp(caption_loss(model, list(scenes))))
    return metrics


# --- interference experiment ----------------------------------------------------------------

def _check_comparable(cfgs: dict) -> None:
    shapes = {(c.d, c.heads, c.layers, c.text_len) for c in cfgs.values()}
    if len(shapes) != 1:
        raise IncomparableConfigsError(f"configs differ in width/depth: {sorted(shapes)}")


def probe_batch(model: DrivingModel, scenes, tag: str, seed: int, step: int = 0) -> list[ProbeRecord]:
    b = scene_batch(scenes, model.vocab, model.cfg, rng=np.random.default_rng(seed))
    return group_cosine(model.forward(b, probe=True).snapshots, tag, seed, step)


def train_and_probe(cfg: ModelConfig, ds, seed: int, tag: str, plans=None, euler_steps: int = 10,
                    out_dir: str | os.PathLike | None = None) -> dict:
    """Stages 1 and 2 for one config and seed; forgetting, probe and test metrics."""
    plans = plans or {s: default_plan(s) for s in (1, 2)}
    train, val, test = ds.split("train"), ds.split("val"), ds.split("test")
    model = DrivingModel(cfg, Vocabulary(), seed=seed, anchors=build_instance_banks(train, cfg.perception.n_det,
                                                                                cfg.perception.n_map, seed))
    general = general_slice()
    forgetting = []
    result = None
    for stage in sorted(plans):
        path = None if out_dir is None else Path(out_dir) / f"{tag}_seed{seed}_stage{stage}"
        result = run_stage(plans[stage], train, model, seed,
                           log_path=None if path is None else path.with_suffix(".csv"),
                           checkpoint_path=None if path is None else path.with_suffix(".ckpt"))
        with with_ema(result):
            forgetting.append({"config": tag, "seed": seed, "stage": stage,
                               "general_nll": caption_loss(model, general),
                               "driving_nll": caption_loss(model, val)})
    with with_ema(result):
        records = probe_batch(model, test, tag, seed)
        metrics = evaluate(model, test, euler_steps, seed)
    return {"model": model, "forgetting": forgetting, "probe": records, "metrics": metrics}


def interference_experiment(base: ModelConfig, ds, seeds=(0, 1, 2), out_dir: str | os.PathLike = "probe",
                            plans=None, euler_steps: int = 10, configs=("mot", "shared")) -> dict:
    """Train each config on identical data and budgets; write probe/metrics/forgetting CSVs and SVGs."""
    cfgs = {tag: ModelConfig(base.d, base.heads, base.layers, base.text_len, base.horizon, tag == "shared",
                             base.perception) for tag in configs}
    _check_comparable(cfgs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for tag in configs:
        for seed in seeds:
            runs[tag, seed] = train_and_probe(cfgs[tag], ds, seed, tag, plans, euler_steps, out)
    write_probe_csv(out / "probe.csv", [r for v in runs.values() for r in v["probe"]])
    write_metrics_csv(out / "metrics.csv", [(t, s, "test", v["metrics"]) for (t, s), v in runs.items()])
    write_forgetting_csv(out / "forgetting.csv", [r for v in runs.values() for r in v["forgetting"]])
    curves = {f"{t} seed {s}": [r.cos_und_per for r in v["probe"]] for (t, s), v in runs.items()}
    write_line_svg(out / "probe_cosine.svg", curves, "layer", "cosine(und, per)")
    forget = {f"{t} seed {s}": [r["general_nll"] for r in v["forgetting"]] for (t, s), v in runs.items()}
    write_line_svg(out / "forgetting.svg", forget, "stage", "general-slice NLL")
    return runs


def summarize(runs: dict) -> dict:
    """Directional comparisons between the shared and mot configs."""
    seeds = sorted({s for _, s in runs})
    final = {t: [runs[t, s]["probe"][-1].cos_und_per for s in seeds] for t in ("mot", "shared")}
    rising = [all(b.cos_und_per >= a.cos_und_per for a, b in zip(runs["shared", s]["probe"],
                                                                 runs["shared", s]["probe"][1:])) for s in seeds]

    def degradation(t, s):
        f = runs[t, s]["forgetting"]
        return f[-1]["general_nll"] - f[0]["general_nll"]

    less_forgetting = [degradation("mot", s) < degradation("shared", s) for s in seeds]
    better_l2 = [runs["mot", s]["metrics"]["avg_l2"] <= runs["shared", s]["metrics"]["avg_l2"] for s in seeds]
    return {"final_cos_mot": float(np.mean(final["mot"])), "final_cos_shared": float(np.mean(final["shared"])),
            "cos_gap": float(np.mean(final["shared"]) - np.mean(final["mot"])),
            "shared_rising": rising, "mot_less_forgetting": less_forgetting, "mot_l2_not_worse": better_l2}


# --- files ---------------------------------------------------------------------------------

def _write(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def write_probe_csv(path, records) -> None:
    _write(path, ("config", "seed", "layer", "cos_und_per", "cos_und_act"),
           [(r.config, r.seed, r.layer, r.cos_und_per, r.cos_und_act) for r in records])


def write_metrics_csv(path, runs) -> None:
    """``runs`` yields ``(config, seed, split, metrics dict)``."""
    _write(path, ("config", "seed", "split", "metric", "value"),
           [(c, s, sp, k, float(v)) for c, s, sp, m in runs for k, v in sorted(m.items())])


def write_forgetting_csv(path, rows) -> None:
    _write(path, ("config", "seed", "stage", "general_nll", "driving_nll"),
           [(r["config"], r["seed"], r["stage"], r["general_nll"], r["driving_nll"]) for r in rows])


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def write_line_svg(path, curves: dict, xlabel: str, ylabel: str, width: int = 480, height: int = 320) -> None:
    """Minimal line chart: one polyline per curve, x positions 1..n."""
    ys = [y for c in curves.values() for y in c]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(c) for c in curves.values()), default=1)
    pad = 48

    def px(i):
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def py(y):
        return height - pad - (height - 2 * pad) * (y - lo) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad - 4}" y="{pad}" text-anchor="end" font-size="10">{hi:.3g}</text>',
             f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{lo:.3g}</text>']
    for k, (name, c) in enumerate(curves.items()):
        col = _COLOURS[k % len(_COLOURS)]
        pts = " ".join(f"{px(i):.1f},{py(y):.1f}" for i, y in enumerate(c))
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * k}" font-size="10" fill="{col}">{name}</text>')
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")
