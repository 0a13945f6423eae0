"""ADPIT mean-squared-error loss for multi-ACCDDOA outputs.

For every (frame, class) the target events are spread over the three output
tracks in every arrangement that uses each event at least once (duplicating
events when fewer than three are active), and the loss takes the best
arrangement. Arrangements are the index tuples over the A active events in
lexicographic order, so ties always resolve to the same candidate.
"""

from __future__ import annotations

import itertools

import numpy as np
import torch
from torch import Tensor

from .accddoa import NUM_TRACKS, doa_to_unit, scale_distance, DistanceScaler
from .io_dataset import Event, MAX_POLYPHONY


class AdpitError(ValueError):
    pass


def arrangements(num_active: int, tracks: int = NUM_TRACKS) -> list[tuple[int, ...]]:
    """Track-to-event index tuples covering all ``num_active`` events."""
    if num_active == 0:
        return [(0,) * tracks]
    return [combo for combo in itertools.product(range(num_active), repeat=tracks)
            if len(set(combo)) == num_active]


def _index_table(tracks: int = NUM_TRACKS) -> torch.Tensor:
    """(A_max + 1, 6, tracks) gather indices; short candidate lists repeat their last entry."""
    table = []
    width = max(len(arrangements(a, tracks)) for a in range(MAX_POLYPHONY + 1))
    for a in range(MAX_POLYPHONY + 1):
        rows = arrangements(a, tracks)
        rows = rows + [rows[-1]] * (width - len(rows))
        table.append(rows)
    return torch.tensor(table, dtype=torch.long)


_TABLE = _index_table()


def build_adpit_candidates(events: list[Event], scaler: DistanceScaler) -> np.ndarray:
    """Candidate targets for one (frame, class): (n_candidates, 3, 4).

    Counts are 1, 1, 6, 6 for 0, 1, 2, 3 active events. ``events`` should be
    in source order.
    """
    if len(events) > MAX_POLYPHONY:
        raise AdpitError(f"{len(events)} active events exceed the cap of {MAX_POLYPHONY}")
    rows = np.zeros((max(len(events), 1), 4))
    for i, ev in enumerate(events):
        rows[i, :3] = doa_to_unit(ev.azimuth_deg, ev.elevation_deg)
        rows[i, 3] = scale_distance(ev.distance_m, scaler)
    return np.stack([rows[list(combo)] for combo in arrangements(len(events))])


def candidate_tensor(target: Tensor) -> Tensor:
    """Expand a target tensor (..., tracks, classes, 4) to candidates (..., classes, 6, tracks, 4).

    Active events must occupy tracks 0..A-1; a track counts as active when
    any component is nonzero.
    """
    tgt = target.movedim(-3, -2)  # (..., classes, tracks, 4)
    active = (tgt != 0).any(dim=-1).sum(dim=-1)  # (..., classes)
    idx = _TABLE.to(target.device)[active]  # (..., classes, 6, tracks)
    expanded = tgt.unsqueeze(-3).expand(*tgt.shape[:-2], idx.shape[-2], *tgt.shape[-2:])
    return torch.gather(expanded, -2, idx.unsqueeze(-1).expand(*idx.shape, tgt.shape[-1]))


def adpit_mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over (batch, frame, class) of the best-candidate MSE across each 3x4 block.

    ``pred`` and ``target`` share the layout (..., frames, tracks, classes, 4).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    cands = candidate_tensor(target)
    p = pred.movedim(-3, -2).unsqueeze(-3)  # (..., classes, 1, tracks, 4)
    # per-track errors summed in sorted order so permuting tracks is bit-exact
    per_track = (p - cands).pow(2).sum(dim=-1)  # (..., classes, 6, tracks)
    errs = per_track.sort(dim=-1).values.sum(dim=-1) / (cands.shape[-2] * cands.shape[-1])
    best = errs.argmin(dim=-1, keepdim=True)
    return errs.gather(-1, best).mean()


def adpit_mse_candidates(pred_block: np.ndarray, candidates: np.ndarray) -> float:
    """Loss for one (frame, class): pred (3, 4) against candidates (n, 3, 4)."""
    errs = ((np.asarray(pred_block)[None] - candidates) ** 2).mean(axis=(1, 2))
    return float(errs.min())
