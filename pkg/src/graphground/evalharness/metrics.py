"""Grounding accuracy at IoU thresholds, overall and per split and per decision path."""

from __future__ import annotations

import csv
import io
import json
from typing import Dict, Iterable, List, Optional, Sequence

from ..scene import AABB, aabb_iou

THRESHOLDS = (("t10", 0.10), ("t25", 0.25), ("t50", 0.50))


def _box(v) -> Optional[AABB]:
    if v is None:
        return None
    return AABB(v[0], v[1])


def query_hits(result: dict, gt: dict) -> Optional[Dict[str, bool]]:
    """Per-threshold hit flags, or None when the ground truth has neither a box nor an id."""
    gt_box = _box(gt.get("gt_aabb"))
    gt_id = gt.get("gt_id")
    if gt_box is None and gt_id is None:
        return None
    if result.get("error") or result.get("predicted_object_id") is None:
        return {k: False for k, _ in THRESHOLDS}
    if gt_box is not None and result.get("predicted_aabb") is not None:
        iou = aabb_iou(_box(result["predicted_aabb"]), gt_box)
        return {k: iou >= t for k, t in THRESHOLDS}
    same = int(result["predicted_object_id"]) == int(gt_id)
    return {k: same for k, _ in THRESHOLDS}


def _summary(flags: Sequence[Dict[str, bool]]) -> dict:
    n = len(flags)
    return {"n": n, "acc": {k: (sum(f[k] for f in flags) / n if n else 0.0) for k, _ in THRESHOLDS}}


def evaluate(results: Iterable[dict], ground_truth: Iterable[dict]) -> dict:
    gt = {g["query_id"]: g for g in ground_truth}
    flags, by_split, by_path = [], {}, {}
    unevaluable = 0
    for r in sorted(results, key=lambda r: str(r["query_id"])):
        g = gt.get(r["query_id"])
        hits = None if g is None else query_hits(r, g)
        if hits is None:
            unevaluable += 1
            continue
        flags.append(hits)
        by_split.setdefault(g.get("split") or "all", []).append(hits)
        by_path.setdefault(r.get("path") or "error", []).append(hits)
    out = _summary(flags)
    out["by_split"] = {k: _summary(v) for k, v in sorted(by_split.items())}
    out["by_path"] = {k: _summary(v) for k, v in sorted(by_path.items())}
    out["unevaluable"] = unevaluable
    return out


def dump_metrics(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def _rows(metrics: dict) -> List[List[str]]:
    rows = [["overall", str(metrics["n"])] + [f"{metrics['acc'][k]:.4f}" for k, _ in THRESHOLDS]]
    for group in ("by_split", "by_path"):
        for name, s in metrics[group].items():
            rows.append([f"{group[3:]}:{name}", str(s["n"])] + [f"{s['acc'][k]:.4f}" for k, _ in THRESHOLDS])
    return rows


HEADER = ["group", "n", "acc@0.10", "acc@0.25", "acc@0.50"]


def metrics_table(metrics: dict) -> str:
    rows = [HEADER] + _rows(metrics)
    widths = [max(len(r[i]) for r in rows) for i in range(len(HEADER))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.append(f"unevaluable: {metrics['unevaluable']}")
    return "\n".join(lines) + "\n"


def metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    w.writerows(_rows(metrics))
    return buf.getvalue()
