"""Frame-level SELD-with-distance scoring.

Predictions and references are matched per (frame, class) by minimum total
angular error. A matched pair is a true positive when it is within the
angular threshold and the relative distance threshold. F1 is macro-averaged
over classes present in either list; localization and relative distance
errors average over matched pairs per class, and a present class with no
matches contributes 180 degrees and 1.0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .io_dataset import Event, EventList, MetadataError

NO_MATCH_LE = 180.0
NO_MATCH_RDE = 1.0


@dataclass
class SelddeMetrics:
    f20: float
    le_cd_deg: float
    rde_cd: float
    seldde_error: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _unit(az_deg, el_deg) -> np.ndarray:
    az, el = np.radians(az_deg), np.radians(el_deg)
    return np.stack([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)], axis=-1)


def angular_error(doa1, doa2) -> float | np.ndarray:
    """Great-circle angle in degrees between (az, el) pairs; broadcasts."""
    a = np.asarray(doa1, dtype=np.float64)
    b = np.asarray(doa2, dtype=np.float64)
    u, v = _unit(a[..., 0], a[..., 1]), _unit(b[..., 0], b[..., 1])
    # atan2 form stays exact near 0 and 180 degrees where arccos loses precision
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    out = np.degrees(np.arctan2(cross, np.sum(u * v, axis=-1)))
    return float(out) if out.ndim == 0 else out


def _doa_key(e: Event) -> tuple[float, float, float]:
    return (e.azimuth_deg, e.elevation_deg, e.distance_m)


def match_events(preds: EventList, refs: EventList) -> dict[tuple[int, int], dict]:
    """Minimum-cost assignment on angular error per (frame, class).

    Each value holds ``pairs`` (list of (pred Event, ref Event, angle)),
    ``fp`` (unmatched predictions) and ``fn`` (unmatched references).
    """
    p_groups = preds.grouped()
    r_groups = refs.grouped()
    out = {}
    for key in sorted(set(p_groups) | set(r_groups)):
        # canonical order makes tie-breaking independent of input order and source labels
        ps = sorted(p_groups.get(key, []), key=_doa_key)
        rs = sorted(r_groups.get(key, []), key=_doa_key)
        pairs = []
        if ps and rs:
            cost = angular_error(np.array([[p.azimuth_deg, p.elevation_deg] for p in ps])[:, None],
                                 np.array([[r.azimuth_deg, r.elevation_deg] for r in rs])[None, :])
            cost = np.atleast_2d(cost)
            rows, cols = linear_sum_assignment(cost)
            pairs = [(ps[i], rs[j], float(cost[i, j])) for i, j in zip(rows, cols)]
        matched_p = {id(p) for p, _, _ in pairs}
        matched_r = {id(r) for _, r, _ in pairs}
        out[key] = {
            "pairs": pairs,
            "fp": [p for p in ps if id(p) not in matched_p],
            "fn": [r for r in rs if id(r) not in matched_r],
        }
    return out


def seldde_error(f20: float, le_cd_deg: float, rde_cd: float) -> float:
    """Aggregate of detection, localization and distance errors, each scaled to ~[0, 1]."""
    return ((1.0 - f20) + le_cd_deg / 180.0 + rde_cd) / 3.0


def compute_metrics(preds: EventList, refs: EventList, num_classes: int,
                    ang_thresh: float = 20.0, rde_thresh: float = 1.0) -> SelddeMetrics:
    """Score predictions against references.

    ``rde_thresh=math.inf`` drops the distance condition from the
    true-positive test.
    """
    for r in refs:
        if not r.distance_m > 0:
            raise MetadataError(f"reference distance must be positive, got {r.distance_m}")
    matches = match_events(preds, refs)
    n_pred = np.zeros(num_classes, dtype=int)
    n_ref = np.zeros(num_classes, dtype=int)
    tp = np.zeros(num_classes, dtype=int)
    ang_sum = np.zeros(num_classes)
    rde_sum = np.zeros(num_classes)
    n_match = np.zeros(num_classes, dtype=int)
    for (_, cls), m in matches.items():
        if not 0 <= cls < num_classes:
            raise MetadataError(f"class {cls} outside [0, {num_classes})")
        n_pred[cls] += len(m["pairs"]) + len(m["fp"])
        n_ref[cls] += len(m["pairs"]) + len(m["fn"])
        for p, r, ang in m["pairs"]:
            rel = abs(p.distance_m - r.distance_m) / r.distance_m
            n_match[cls] += 1
            ang_sum[cls] += ang
            rde_sum[cls] += rel
            if ang <= ang_thresh and rel <= rde_thresh:
                tp[cls] += 1

    per_class = {}
    f1s, les, rdes = [], [], []
    for c in range(num_classes):
        if n_pred[c] + n_ref[c] == 0:
            continue
        # plain floats so metric dicts stay JSON- and checkpoint-safe
        f1 = float(2.0 * tp[c] / (n_pred[c] + n_ref[c]))
        le = float(ang_sum[c] / n_match[c]) if n_match[c] else NO_MATCH_LE
        rde = float(rde_sum[c] / n_match[c]) if n_match[c] else NO_MATCH_RDE
        per_class[c] = {"f20": f1, "le_deg": le, "rde": rde, "tp": int(tp[c]),
                        "n_pred": int(n_pred[c]), "n_ref": int(n_ref[c]),
                        "n_match": int(n_match[c])}
        f1s.append(f1)
        les.append(le)
        rdes.append(rde)

    if not f1s:
        # nothing to detect and nothing detected
        return SelddeMetrics(1.0, 0.0, 0.0, 0.0, {})
    f20 = float(np.mean(f1s))
    le_cd = float(np.mean(les))
    rde_cd = float(np.mean(rdes))
    return SelddeMetrics(f20, le_cd, rde_cd, seldde_error(f20, le_cd, rde_cd), per_class)
