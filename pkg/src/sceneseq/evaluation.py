"""Benchmark scoring: turns ground-truth records and model outputs into an EvalReport."""

from __future__ import annotations

import os

import numpy as np

from sceneseq import metrics
from sceneseq.gcot import parse_cot_response
from sceneseq.identifiers import parse_positions
from sceneseq.scene import load_scene, object_aabb

BENCHMARKS = ("scanrefer", "multi3dref", "scan2cap", "scanqa", "sqa3d", "stiou")


class SceneCache:
    """Loads bundles from ``scene_dir/<scene_id>`` on first use."""

    def __init__(self, scene_dir=None, scenes=None):
        self.scene_dir = scene_dir
        self._scenes = dict(scenes or {})

    def __getitem__(self, scene_id):
        if scene_id not in self._scenes:
            if self.scene_dir is None:
                raise KeyError(f"scene {scene_id!r} not loaded and no scene directory given")
            self._scenes[scene_id] = load_scene(os.path.join(self.scene_dir, scene_id))
        return self._scenes[scene_id]


def predicted_positions(text: str, width: int = 3) -> list:
    """ID positions a response commits to: the last step of a stepped answer, else every token."""
    parsed = parse_cot_response(text, width)
    if parsed.steps and isinstance(parsed.final_answer, list):
        return parsed.final_answer
    return parse_positions(text, width)


def answer_text(text: str) -> str:
    parsed = parse_cot_response(text)
    return parsed.final_answer if isinstance(parsed.final_answer, str) else text.strip()


def _position_box(scene, gt, position):
    order = gt["meta"].get("id_order", list(range(scene.n_objects)))
    if not 1 <= position <= len(order):
        return None
    return object_aabb(scene, order[position - 1])


def _gt_boxes(scene, gt):
    if "gt_boxes" in gt["meta"]:
        return [(np.array(lo), np.array(hi)) for lo, hi in gt["meta"]["gt_boxes"]]
    return [_position_box(scene, gt, p) for p in gt["target_ids"]]


def _paired(preds: dict, gts: list):
    missing = [g["record_id"] for g in gts if g["record_id"] not in preds]
    if missing:
        raise KeyError(f"{len(missing)} ground-truth records lack predictions, e.g. {missing[0]!r}")
    return [(g, preds[g["record_id"]]) for g in sorted(gts, key=lambda g: g["record_id"])]


def _means(rows, keys):
    return {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in keys}


def _thr(t):
    return f"{t:g}"


def eval_scanrefer(pairs, scenes, thresholds, width=3):
    rows = []
    for gt, pred in pairs:
        scene = scenes[gt["scene_id"]]
        pos = predicted_positions(pred.get("text", ""), width)
        box = _position_box(scene, gt, pos[0]) if pos else None
        iou = 0.0 if box is None else metrics.aabb_iou(box, _gt_boxes(scene, gt)[0])
        row = {"record_id": gt["record_id"], "parsed": int(box is not None), "iou": iou}
        for t in thresholds:
            row[f"acc@{_thr(t)}"] = int(iou >= t)
        rows.append(row)
    means = _means(rows, [f"acc@{_thr(t)}" for t in thresholds])
    return {f"Acc@{_thr(t)}": means[f"acc@{_thr(t)}"] for t in thresholds}, rows


def eval_multi3dref(pairs, scenes, thresholds, width=3):
    rows = []
    for gt, pred in pairs:
        scene = scenes[gt["scene_id"]]
        boxes = [_position_box(scene, gt, p) for p in dict.fromkeys(predicted_positions(pred.get("text", ""), width))]
        boxes = [b for b in boxes if b is not None]
        gboxes = _gt_boxes(scene, gt)
        row = {"record_id": gt["record_id"], "n_pred": len(boxes), "n_gt": len(gboxes)}
        for t in thresholds:
            tp, fp, fn = metrics.match_counts(boxes, gboxes, t)
            row.update({f"tp@{_thr(t)}": tp, f"fp@{_thr(t)}": fp, f"fn@{_thr(t)}": fn})
        rows.append(row)
    agg = {}
    for t in thresholds:
        s = _thr(t)
        agg[f"F1@{s}"] = metrics.f1_from_counts(*(sum(r[f"{k}@{s}"] for r in rows) for k in ("tp", "fp", "fn")))
    return agg, rows


def eval_scan2cap(pairs, scenes, thresholds, cider_scale=metrics.CIDER_SCALE, width=3):
    ious, corpus = [], []
    for gt, pred in pairs:
        refs = gt["meta"].get("references") or [gt["assistant_text"]]
        corpus.append((pred.get("text", ""), refs))
        if "iou" in pred:
            ious.append(float(pred["iou"]))
        elif "gt_boxes" in gt["meta"]:
            scene = scenes[gt["scene_id"]]
            ious.append(metrics.aabb_iou(_position_box(scene, gt, gt["target_ids"][0]), _gt_boxes(scene, gt)[0]))
        else:
            ious.append(1.0)
    cid = metrics.cider(corpus, scale=cider_scale)[1] if corpus else []
    rows = []
    for (gt, _), (p, refs), iou, c in zip(pairs, corpus, ious, cid):
        b = metrics.bleu4(p, refs)
        row = {"record_id": gt["record_id"], "iou": iou, "cider": c, "bleu4": b}
        for t in thresholds:
            row[f"cider@{_thr(t)}"] = c if iou >= t else 0.0
            row[f"bleu4@{_thr(t)}"] = b if iou >= t else 0.0
        rows.append(row)
    agg = {}
    for t in thresholds:
        m = _means(rows, [f"cider@{_thr(t)}", f"bleu4@{_thr(t)}"])
        agg[f"C@{_thr(t)}"] = m[f"cider@{_thr(t)}"]
        agg[f"B-4@{_thr(t)}"] = m[f"bleu4@{_thr(t)}"]
    return agg, rows


def eval_qa(pairs, with_captions=True, cider_scale=metrics.CIDER_SCALE):
    corpus = []
    for gt, pred in pairs:
        refs = gt["meta"].get("answers") or [gt["assistant_text"]]
        corpus.append((answer_text(pred.get("text", "")), refs))
    cid = metrics.cider(corpus, scale=cider_scale)[1] if (corpus and with_captions) else None
    rows = []
    for k, ((gt, _), (p, refs)) in enumerate(zip(pairs, corpus)):
        row = {"record_id": gt["record_id"]}
        if with_captions:
            row["cider"] = cid[k]
            row["bleu4"] = metrics.bleu4(p, refs)
        row["em"] = metrics.exact_match(p, refs)
        row["em_r"] = metrics.exact_match(p, refs, refined=True)
        rows.append(row)
    names = {"cider": "CIDEr", "bleu4": "BLEU-4", "em": "EM", "em_r": "EM-R"}
    keys = list(names) if with_captions else ["em", "em_r"]
    return {names[k]: v for k, v in _means(rows, keys).items()}, rows


def eval_stiou(pairs, thresholds, pred_dir=".", gt_dir="."):
    rows = []
    for gt, pred in pairs:
        g = metrics.load_masks(os.path.join(gt_dir, gt["masks_path"]))
        p = metrics.load_masks(os.path.join(pred_dir, pred["masks_path"]))
        s = metrics.st_iou(p, g)
        row = {"record_id": gt["record_id"], "st_iou": s}
        for t in thresholds:
            row[f"acc@{_thr(t)}"] = int(s >= t)
        rows.append(row)
    agg = {"ST-IoU": _means(rows, ["st_iou"])["st_iou"]}
    for t in thresholds:
        agg[f"Acc@{_thr(t)}"] = _means(rows, [f"acc@{_thr(t)}"])[f"acc@{_thr(t)}"]
    return agg, rows


def evaluate(benchmark, preds, gts, scenes=None, thresholds=metrics.THRESHOLDS,
             cider_scale=metrics.CIDER_SCALE, pred_dir=".", gt_dir=".", config=None) -> metrics.EvalReport:
    """Score ``preds`` (record_id -> prediction dict) against ground-truth dicts ``gts``."""
    if benchmark not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {benchmark!r}")
    thresholds = tuple(sorted(float(t) for t in thresholds))
    if not isinstance(scenes, SceneCache):
        scenes = SceneCache(scenes=scenes)
    pairs = _paired(preds, gts)
    if benchmark == "scanrefer":
        agg, rows = eval_scanrefer(pairs, scenes, thresholds)
    elif benchmark == "multi3dref":
        agg, rows = eval_multi3dref(pairs, scenes, thresholds)
    elif benchmark == "scan2cap":
        agg, rows = eval_scan2cap(pairs, scenes, thresholds, cider_scale)
    elif benchmark == "scanqa":
        agg, rows = eval_qa(pairs, True, cider_scale)
    elif benchmark == "sqa3d":
        agg, rows = eval_qa(pairs, False)
    else:
        agg, rows = eval_stiou(pairs, thresholds, pred_dir, gt_dir)
    agg["n"] = len(rows)
    cfg = {"benchmark": benchmark, "thresholds": list(thresholds), "cider_scale": cider_scale}
    cfg.update(config or {})
    return metrics.EvalReport(benchmark, agg, rows, cfg)


def recompute_aggregates(report: metrics.EvalReport) -> dict:
    """Rebuild the aggregate map from per-sample rows alone."""
    rows, b = report.rows, report.benchmark
    thresholds = report.config["thresholds"]
    out = {"n": len(rows)}
    if b == "scanrefer":
        for t in thresholds:
            out[f"Acc@{_thr(t)}"] = _means(rows, [f"acc@{_thr(t)}"])[f"acc@{_thr(t)}"]
    elif b == "multi3dref":
        for t in thresholds:
            s = _thr(t)
            out[f"F1@{s}"] = metrics.f1_from_counts(*(sum(r[f"{k}@{s}"] for r in rows) for k in ("tp", "fp", "fn")))
    elif b == "scan2cap":
        for t in thresholds:
            out[f"C@{_thr(t)}"] = _means(rows, [f"cider@{_thr(t)}"])[f"cider@{_thr(t)}"]
            out[f"B-4@{_thr(t)}"] = _means(rows, [f"bleu4@{_thr(t)}"])[f"bleu4@{_thr(t)}"]
    elif b in ("scanqa", "sqa3d"):
        names = {"cider": "CIDEr", "bleu4": "BLEU-4", "em": "EM", "em_r": "EM-R"}
        for k, name in names.items():
            if rows and k in rows[0]:
                out[name] = _means(rows, [k])[k]
    else:
        out["ST-IoU"] = _means(rows, ["st_iou"])["st_iou"]
        for t in thresholds:
            out[f"Acc@{_thr(t)}"] = _means(rows, [f"acc@{_thr(t)}"])[f"acc@{_thr(t)}"]
    return out
