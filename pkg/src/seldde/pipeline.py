"""Dataset assembly, training, evaluation, inference and reporting."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .accddoa import DistanceScaler, decode_output, encode_labels, fit_distance_scaler
from .adpit import adpit_mse
from .augment import (AugPolicy, acs_apply_features, acs_apply_target, aug_magnitude,
                      freq_shift, mixup, random_acs, spec_augment)
from .io_dataset import (Event, EventList, format_metadata_csv, frames_per_segment, load_foa_wav,
                         merge_segments, parse_metadata_csv, segment_clip, write_foa_wav)
from .metrics import SelddeMetrics, compute_metrics
from .model import ModelConfig, SeldModel
from .salsa import FeatureStats, StftConfig, extract_salsa, load_feature, save_feature
from .scene_synth import SceneConfig, distance_histogram, synth_scene

log = logging.getLogger(__name__)

CACHE_ENV = "SELDDE_CACHE_DIR"
SEGMENT_S = 5.0
SILENCE_POWER = 1e-9


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# manifests and cached segments


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    data = json.loads(path.read_text())
    clips = data.get("clips", [])
    root = path.parent
    for clip in clips:
        for key in ("wav", "metadata"):
            if clip.get(key) and not Path(clip[key]).is_absolute():
                clip[key] = str(root / clip[key])
        clip.setdefault("source_tag", "synthetic")
    data.setdefault("name", path.stem)
    data["clips"] = clips
    return data


def write_synth_dataset(out_dir: str | Path, num_clips: int, base: SceneConfig,
                        name: str = "synthetic", source_tag: str = "synthetic") -> Path:
    """Render ``num_clips`` scenes (seeds base.seed, base.seed + 1, ...) plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = []
    for i in range(num_clips):
        cfg = replace(base, seed=base.seed + i)
        clip, events = synth_scene(cfg, source_tag)
        stem = f"{name}_{i:04d}"
        write_foa_wav(out_dir / f"{stem}.wav", clip)
        (out_dir / f"{stem}.csv").write_text(format_metadata_csv(events))
        clips.append({"wav": f"{stem}.wav", "metadata": f"{stem}.csv", "source_tag": source_tag,
                      "seed": cfg.seed})
    manifest = {"name": name, "seed": base.seed, "config": base.to_dict(), "clips": clips}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def cache_dir(explicit: str | Path | None = None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "seldde"


@dataclass
class Segment:
    clip_id: str
    index: int
    source_tag: str
    feature: np.ndarray
    events: EventList


def _file_digest(path: Path, stft_cfg: StftConfig) -> str:
    h = hashlib.sha1(path.read_bytes())
    h.update(json.dumps(stft_cfg.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:20]


def load_segments(manifest: dict, cache: Path | None = None, stft_cfg: StftConfig = StftConfig(),
                  distance_unit: str = "m") -> list[Segment]:
    """Cut every clip into 5 s segments with raw SALSA features, reading/writing the cache."""
    segments = []
    for clip_entry in manifest["clips"]:
        wav = Path(clip_entry["wav"])
        meta = clip_entry.get("metadata")
        events = (parse_metadata_csv(Path(meta).read_text(), distance_unit)
                  if meta else EventList())
        tag = clip_entry["source_tag"]
        key = _file_digest(wav, stft_cfg) if cache else None
        cached = []
        if cache is not None:
            cached = sorted(cache.glob(f"{key}_*.f32"), key=lambda p: int(p.stem.split("_")[-1]))
        if cached:
            feats = [load_feature(p) for p in cached]
            seg_frames = frames_per_segment(SEGMENT_S)
            parts = _split_events(events, seg_frames, len(feats))
        else:
            clip = load_foa_wav(wav, tag)
            pieces = segment_clip(clip, events, SEGMENT_S)
            feats = [extract_salsa(seg, stft_cfg) for seg, _ in pieces]
            parts = [ev for _, ev in pieces]
            if cache is not None:
                cache.mkdir(parents=True, exist_ok=True)
                for i, f in enumerate(feats):
                    save_feature(cache / f"{key}_{i}.f32", f, stft_cfg,
                                 extra={"source": str(wav), "segment": i})
        for i, (f, ev) in enumerate(zip(feats, parts)):
            segments.append(Segment(str(wav), i, tag, f, ev))
    return segments


def _split_events(events: EventList, seg_frames: int, n_seg: int) -> list[EventList]:
    buckets = [[] for _ in range(max(n_seg, (events.events[-1].frame // seg_frames + 1)
                                     if events.events else n_seg))]
    for ev in events:
        buckets[ev.frame // seg_frames].append(replace(ev, frame=ev.frame % seg_frames))
    return [EventList(b, seg_frames) for b in buckets[:n_seg]]


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    train_manifests: list[str] = field(default_factory=list)
    val_manifest: str | None = None
    checkpoint_dir: str = "checkpoints"
    cache_dir: str | None = None
    epochs: int = 200
    finetune_epochs: int = 50
    batch_size: int = 32
    peak_lr: float = 5e-4
    warmup_steps: int | None = None
    warmup_fraction: float = 0.05
    finetune_lr_factor: float = 0.1
    seed: int = 0
    eval_every: int = 1
    act_threshold: float = 0.5
    unify_deg: float | None = 15.0
    distance_unit: str = "m"
    deterministic: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugPolicy = field(default_factory=AugPolicy)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.aug, dict):
            self.aug = AugPolicy(**self.aug)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        path = Path(path)
        data = yaml.safe_load(path.read_text()) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        root = path.parent
        for key in ("train_manifests",):
            data[key] = [str(root / p) if not Path(p).is_absolute() else p
                         for p in data.get(key, [])]
        for key in ("val_manifest", "checkpoint_dir", "cache_dir"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(root / data[key])
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, peak_lr: float, warmup: int) -> float:
    """Transformer schedule rescaled so the peak equals ``peak_lr`` at ``step == warmup``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: SeldModel, scaler: DistanceScaler,
                    stats: FeatureStats, extra: dict | None = None) -> Path:
    bundle = {
        "version": __version__,
        "state_dict": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "scaler": scaler.to_dict(),
        "feature_stats": stats.to_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(bundle, path)
    return path


def load_checkpoint(path: str | Path):
    """Returns (model in eval mode, scaler, feature stats, raw bundle)."""
    try:
        bundle = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    cfg = ModelConfig.from_dict(bundle["model_config"])
    model = SeldModel(cfg)
    model.load_state_dict(bundle["state_dict"])
    model.eval()
    return (model, DistanceScaler.from_dict(bundle["scaler"]),
            FeatureStats.from_dict(bundle["feature_stats"]), bundle)


# --------------------------------------------------------------------------
# inference


def silent_label_frames(raw_feature: np.ndarray, frames_per_label: int) -> np.ndarray:
    """Label frames whose W spectrogram power never exceeds the silence floor."""
    peak = np.exp(raw_feature[0]).max(axis=-1)
    n_label = raw_feature.shape[1] // frames_per_label
    return peak[: n_label * frames_per_label].reshape(n_label, frames_per_label).max(axis=1) \
        < SILENCE_POWER


def predict_segments(model: SeldModel, stats: FeatureStats, raw_features: Sequence[np.ndarray],
                     batch_size: int = 8) -> np.ndarray:
    """Model outputs (n_segments, 50, tracks, classes, 4), silent label frames zeroed."""
    cfg = model.cfg
    outs = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(0, len(raw_features), batch_size):
            chunk = raw_features[i:i + batch_size]
            for f in chunk:
                if f.shape != (cfg.in_channels, cfg.n_frames, cfg.n_freq):
                    raise CheckpointError(f"feature shape {f.shape} does not match model input")
            x = torch.from_numpy(np.stack([stats.apply(f) for f in chunk]))
            x = x.to(next(model.parameters()).dtype)
            outs.append(model(x).double().numpy())
    model.train(was_training)
    out = np.concatenate(outs) if outs else np.zeros((0, cfg.out_frames, cfg.tracks, cfg.classes, 4))
    per_label = cfg.n_frames // cfg.out_frames
    for k, f in enumerate(raw_features):
        out[k, silent_label_frames(f, per_label)] = 0.0
    return out


def _offset_events(events: EventList, offset: int) -> list:
    return [replace(e, frame=e.frame + offset) for e in events]


def score_segments(model: SeldModel, scaler: DistanceScaler, stats: FeatureStats,
                   segments: Sequence[Segment], act_threshold: float = 0.5,
                   unify_deg: float | None = 15.0) -> SelddeMetrics:
    """Predict every segment, merge per clip, then score all clips together."""
    cfg = model.cfg
    for seg in segments:
        for ev in seg.events:
            if ev.class_idx >= cfg.classes:
                raise CheckpointError(
                    f"label class {ev.class_idx} exceeds model classes {cfg.classes}")
    outputs = predict_segments(model, stats, [s.feature for s in segments])
    seg_frames = cfg.out_frames
    preds, refs = [], []
    for k, seg in enumerate(segments):
        # clip frames keep their global index; k spaces clips apart
        offset = k * seg_frames
        preds.extend(decode_output(outputs[k], scaler, act_threshold, offset, unify_deg))
        refs.extend(_offset_events(seg.events, offset))
    return compute_metrics(EventList(preds), EventList(refs), cfg.classes)


def _decode_settings(bundle: dict, act_threshold, unify_deg) -> tuple[float, float | None]:
    saved = bundle.get("extra", {}).get("decode", {})
    if act_threshold is None:
        act_threshold = saved.get("act_threshold", 0.5)
    if unify_deg is None:
        unify_deg = saved.get("unify_deg", 15.0)
    return act_threshold, (unify_deg or None)


def evaluate(checkpoint: str | Path, manifest_path: str | Path, cache: Path | None = None,
             distance_unit: str = "m", act_threshold: float | None = None,
             unify_deg: float | None = None) -> SelddeMetrics:
    """Score a checkpoint on a manifest; decode settings default to those saved in training."""
    model, scaler, stats, bundle = load_checkpoint(checkpoint)
    act_threshold, unify_deg = _decode_settings(bundle, act_threshold, unify_deg)
    manifest = read_manifest(manifest_path)
    segments = load_segments(manifest, cache, distance_unit=distance_unit)
    for seg in segments:
        if seg.feature.shape[0] != model.cfg.in_channels:
            raise CheckpointError("feature channels do not match the checkpoint")
    return score_segments(model, scaler, stats, segments, act_threshold, unify_deg)


def infer(checkpoint: str | Path, wav_path: str | Path, out_csv: str | Path | None = None,
          act_threshold: float | None = None, unify_deg: float | None = None) -> EventList:
    """Predict events for one WAV; frames are clip-global, distances in meters."""
    model, scaler, stats, bundle = load_checkpoint(checkpoint)
    act_threshold, unify_deg = _decode_settings(bundle, act_threshold, unify_deg)
    clip = load_foa_wav(wav_path)
    pieces = segment_clip(clip, EventList(), SEGMENT_S)
    feats = [extract_salsa(seg) for seg, _ in pieces]
    outputs = predict_segments(model, stats, feats)
    seg_events = [decode_output(o, scaler, act_threshold, unify_deg=unify_deg) for o in outputs]
    events = merge_segments(seg_events, model.cfg.out_frames)
    if out_csv is not None:
        Path(out_csv).write_text(format_metadata_csv(events))
    return events


# --------------------------------------------------------------------------
# training


def _set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _make_batch(segments: Sequence[Segment], targets: Sequence[np.ndarray], idx: np.ndarray,
                stats: FeatureStats, policy: AugPolicy, magnitude: float,
                rng: np.random.Generator, augment: bool):
    feats, tgts = [], []
    for i in idx:
        f, t = segments[i].feature, targets[i]
        if augment and segments[i].source_tag == "real" and rng.random() < policy.acs_probability:
            acs = random_acs(rng)
            f, t = acs_apply_features(f, acs), acs_apply_target(t, acs)
        f = stats.apply(f)
        if augment:
            f = spec_augment(f, policy, magnitude, rng)
            max_shift = int(round(magnitude * policy.freq_shift_max))
            if max_shift:
                f = freq_shift(f, int(rng.integers(-max_shift, max_shift + 1)), policy.freq_shift_max)
        feats.append(f)
        tgts.append(t)
    if augment and len(feats) > 1:
        perm = rng.permutation(len(feats))
        mixed = []
        for j, p in enumerate(perm):
            if rng.random() < policy.mixup_prob * magnitude:
                mixed.append(mixup((feats[j], tgts[j]), (feats[p], tgts[p]), policy.mixup_alpha, rng))
            else:
                mixed.append((feats[j], tgts[j]))
        feats, tgts = [m[0] for m in mixed], [m[1] for m in mixed]
    x = torch.from_numpy(np.stack(feats).astype(np.float32))
    y = torch.from_numpy(np.stack(tgts).astype(np.float32))
    return x, y


@dataclass
class StageResult:
    best_path: Path | None
    best_f20: float
    log: list[dict]


def _run_stage(name: str, model: SeldModel, segments: list[Segment], targets: list[np.ndarray],
               val_segments: list[Segment], scaler: DistanceScaler, stats: FeatureStats,
               cfg: TrainConfig, epochs: int, peak_lr: float, rng: np.random.Generator,
               ckpt_path: Path) -> StageResult:
    steps_per_epoch = math.ceil(len(segments) / cfg.batch_size)
    total = max(1, epochs * steps_per_epoch)
    warmup = cfg.warmup_steps or max(1, int(round(cfg.warmup_fraction * total)))
    opt = torch.optim.Adam(model.parameters(), lr=peak_lr)
    use_aug = cfg.aug.enabled
    best_f20, best_path = -1.0, None
    history = []
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(segments))
        losses = []
        for b in range(steps_per_epoch):
            step += 1
            lr = lr_schedule(step, peak_lr, warmup)
            for g in opt.param_groups:
                g["lr"] = lr
            mag = aug_magnitude(lr, peak_lr, cfg.aug.magnitude_floor)
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = _make_batch(segments, targets, idx, stats, cfg.aug, mag, rng, use_aug)
            loss = adpit_mse(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"{name}: non-finite loss {loss.item()} at epoch {epoch}, "
                                    f"step {step}, lr {lr:.3e}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        entry = {"stage": name, "epoch": epoch, "step": step, "lr": lr,
                 "loss": float(np.mean(losses))}
        if epoch % cfg.eval_every == 0 or epoch == epochs:
            metrics = score_segments(model, scaler, stats, val_segments, cfg.act_threshold,
                                     cfg.unify_deg)
            entry["val"] = metrics.to_dict()
            if metrics.f20 > best_f20:
                best_f20 = metrics.f20
                best_path = save_checkpoint(ckpt_path, model, scaler, stats,
                                            {"stage": name, "epoch": epoch,
                                             "val_metrics": metrics.to_dict(),
                                             "decode": {"act_threshold": cfg.act_threshold,
                                                        "unify_deg": cfg.unify_deg or 0.0}})
                entry["saved"] = True
            log.info("%s epoch %d loss %.5f val F20 %.3f LE %.1f RDE %.3f", name, epoch,
                     entry["loss"], metrics.f20, metrics.le_cd_deg, metrics.rde_cd)
        history.append(entry)
    return StageResult(best_path, best_f20, history)


def train(cfg: TrainConfig) -> Path:
    """Main training then real-only fine-tuning; returns the final best checkpoint."""
    if not cfg.train_manifests:
        raise ConfigError("no training manifests given")
    _set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    cache = cache_dir(cfg.cache_dir)
    train_segments = []
    for m in cfg.train_manifests:
        manifest = read_manifest(m)
        if not manifest["clips"]:
            raise ConfigError(f"manifest {m} lists no clips")
        train_segments.extend(load_segments(manifest, cache, distance_unit=cfg.distance_unit))
    if cfg.val_manifest:
        val_segments = load_segments(read_manifest(cfg.val_manifest), cache,
                                     distance_unit=cfg.distance_unit)
    else:
        val_segments = train_segments
    if not val_segments:
        raise ConfigError("validation set is empty")

    distances = np.concatenate([s.events.distances() for s in train_segments])
    scaler = fit_distance_scaler(distances)
    stats = FeatureStats.fit([s.feature for s in train_segments])
    targets = [encode_labels(s.events, scaler, cfg.model.classes, cfg.model.out_frames)
               for s in train_segments]

    model = SeldModel(cfg.model)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    main = _run_stage("main", model, train_segments, targets, val_segments, scaler, stats, cfg,
                      cfg.epochs, cfg.peak_lr, rng, ckpt_dir / "best_main.pt")
    history = list(main.log)
    final = main.best_path

    real_idx = [i for i, s in enumerate(train_segments) if s.source_tag == "real"]
    if cfg.finetune_epochs > 0 and real_idx and final is not None:
        model, _, _, _ = load_checkpoint(final)
        ft = _run_stage("finetune", model, [train_segments[i] for i in real_idx],
                        [targets[i] for i in real_idx], val_segments, scaler, stats, cfg,
                        cfg.finetune_epochs, cfg.peak_lr * cfg.finetune_lr_factor, rng,
                        ckpt_dir / "best_finetune.pt")
        history.extend(ft.log)
        if ft.best_path is not None:
            final = ft.best_path
    elif cfg.finetune_epochs > 0:
        log.info("no real-tagged training data; skipping fine-tuning")

    (ckpt_dir / "train_log.json").write_text(json.dumps(history, indent=2))
    _, _, _, bundle = load_checkpoint(final)
    (ckpt_dir / "metrics.json").write_text(json.dumps(bundle["extra"]["val_metrics"], indent=2))
    (ckpt_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return final


# --------------------------------------------------------------------------
# reporting


def manifest_distances(manifest: dict, distance_unit: str = "m") -> np.ndarray:
    out = []
    for clip in manifest["clips"]:
        if clip.get("metadata"):
            out.append(parse_metadata_csv(Path(clip["metadata"]).read_text(), distance_unit)
                       .distances())
    return np.concatenate(out) if out else np.zeros(0)


def report(manifest_paths: Sequence[str | Path], out_dir: str | Path,
           bin_edges: Sequence[float] | None = None,
           metrics_paths: Sequence[str | Path] = (), distance_unit: str = "m") -> list[Path]:
    """Distance histograms per manifest, an overlay when there are several, and a metrics table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = []
    for p in manifest_paths:
        m = read_manifest(p)
        datasets.append((m["name"], manifest_distances(m, distance_unit)))
    if bin_edges is None:
        hi = max([d.max() for _, d in datasets if d.size] + [1.0])
        bin_edges = np.linspace(0.0, math.ceil(hi * 2) / 2, 21)
    edges = np.asarray(bin_edges, dtype=np.float64)
    written = []
    counts_rows = []
    for name, d in datasets:
        counts = distance_histogram([Event(0, 0, 0, 0.0, 0.0, float(x)) for x in d], edges)
        counts_rows.append((name, counts))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k")
        ax.set_xlabel("distance (m)")
        ax.set_ylabel("event frames")
        ax.set_title(name)
        fig.tight_layout()
        path = out_dir / f"distance_hist_{name}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    if len(datasets) > 1:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, counts in counts_rows:
            total = counts.sum()
            ax.stairs(counts / total if total else counts, edges, label=name)
        ax.set_xlabel("distance (m)")
        ax.set_ylabel("fraction of event frames")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "distance_hist_comparison.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    csv_path = out_dir / "distance_counts.csv"
    lines = ["dataset," + ",".join(f"{a:g}-{b:g}" for a, b in zip(edges[:-1], edges[1:]))]
    lines += [name + "," + ",".join(str(int(c)) for c in counts) for name, counts in counts_rows]
    csv_path.write_text("\n".join(lines) + "\n")
    written.append(csv_path)

    if metrics_paths:
        rows = ["run,f20,le_cd_deg,rde_cd,seldde_error"]
        for mp in metrics_paths:
            m = json.loads(Path(mp).read_text())
            rows.append(f"{Path(mp).stem},{m['f20']:.4f},{m['le_cd_deg']:.2f},"
                        f"{m['rde_cd']:.4f},{m['seldde_error']:.4f}")
        table = out_dir / "metrics_summary.csv"
        table.write_text("\n".join(rows) + "\n")
        written.append(table)
    return written
