import json
import time
from pathlib import Path

import pytest
import yaml

from seldde.pipeline import TrainConfig, train, write_synth_dataset
from seldde.scene_synth import SceneConfig

ROOT = Path(__file__).resolve().parents[1]
OVERFIT_CONFIG = ROOT / "configs" / "overfit_toy.yaml"


def overfit_scenes() -> SceneConfig:
    return SceneConfig(num_events=4, num_classes=4, max_polyphony=2, snr_db=20.0, seed=0)


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory):
    """The toy overfit configuration trained twice from scratch on 8 scenes."""
    root = tmp_path_factory.mktemp("overfit")
    manifest = write_synth_dataset(root / "data", 8, overfit_scenes(), "overfit")
    runs = []
    for k in range(2):
        cfg = TrainConfig.from_file(OVERFIT_CONFIG, train_manifests=[str(manifest)],
                                    checkpoint_dir=str(root / f"run{k}"),
                                    cache_dir=str(root / "cache"))
        start = time.perf_counter()
        ckpt = train(cfg)
        runs.append({
            "checkpoint": ckpt,
            "dir": Path(cfg.checkpoint_dir),
            "seconds": time.perf_counter() - start,
            "metrics": json.loads((Path(cfg.checkpoint_dir) / "metrics.json").read_text()),
            "log": json.loads((Path(cfg.checkpoint_dir) / "train_log.json").read_text()),
            "config": cfg,
        })
    return {"manifest": manifest, "cache": root / "cache", "runs": runs}


def tiny_config_file(path: Path, manifests, checkpoint_dir, **extra) -> Path:
    data = {
        "train_manifests": [str(m) for m in manifests],
        "checkpoint_dir": str(checkpoint_dir),
        "epochs": 1,
        "finetune_epochs": 0,
        "batch_size": 2,
        "eval_every": 1,
        "model": {"stage_channels": [8, 8, 8, 8], "blocks_per_stage": [1, 1, 1, 1],
                  "conformer_layers": 1, "d_model": 16, "attention_heads": 2,
                  "conv_kernel": 7, "dropout": 0.0, "classes": 2},
    }
    data.update(extra)
    path.write_text(yaml.safe_dump(data))
    return path


ACCEPTANCE_RESULTS: dict[int, tuple[str, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title, seconds = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({seconds:.1f} s)")
