"""
Run orchestration: executes configured stages in order, skips stages
whose outputs exist (unless forced), and keeps the run manifest.
"""

import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional

import torch

from config import CHECKPOINT_SUFFIX, FORMAT_VERSION
from pipeline.experiment_config import ALL_STAGES, ExperimentConfig
from pipeline.stages import STAGES, RunContext, RunLayout
from src.checkpoint import file_hash, write_json_atomic

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    """Config echo, per-stage outputs and metrics, checkpoint hashes."""

    run_id: str
    config: dict
    seed: int
    format_version: int = FORMAT_VERSION
    status: str = "running"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    started: str = ""
    finished: Optional[str] = None
    stages: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    @classmethod
    def load_or_new(cls, path: Path, config: ExperimentConfig) -> "RunManifest":
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
            if data.get("run_id") == config.run_id:
                return cls(**data)
            logger.warning(f"  Manifest at {path} belongs to another config; starting a new one")
        return cls(
            run_id=config.run_id,
            config=config.to_dict(),
            seed=config.seed,
            started=datetime.now().isoformat(timespec="seconds"),
            environment={"python": platform.python_version(), "torch": torch.__version__},
        )

    def record_stage(self, name: str, run_dir: Path, outputs: Iterable[Path],
                     metrics: dict, seconds: float, skipped: bool = False) -> None:
        relative = []
        for path in outputs:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"stage '{name}' declared missing output {path}")
            rel = str(path.relative_to(run_dir))
            relative.append(rel)
            if path.suffix == CHECKPOINT_SUFFIX:
                self.checkpoints[rel] = file_hash(path)
        self.stages[name] = {
            "status": "skipped" if skipped else "complete",
            "seconds": round(seconds, 3),
            "outputs": sorted(set(relative)),
            "metrics": metrics if not skipped else self.stages.get(name, {}).get("metrics", {}),
        }

    def write(self, path: Path) -> Path:
        return write_json_atomic(path, asdict(self))


def run_stage(name: str, ctx: RunContext, manifest: RunManifest) -> None:
    """Run one stage (or skip it) and record it in the manifest."""
    stage = STAGES[name]
    declared = stage.outputs(ctx)
    if not ctx.force and declared and all(p.exists() for p in declared):
        logger.info(f"Stage {name}: outputs present, skipping (use --force to re-run)")
        previous = manifest.stages.get(name, {}).get("outputs", [])
        outputs = [ctx.run_dir / p for p in previous] or declared
        try:
            manifest.record_stage(name, ctx.run_dir, outputs, {}, 0.0, skipped=True)
        except FileNotFoundError as exc:
            raise StageError(name, exc) from exc
        return

    logger.info(f"Stage {name}: started")
    start = time.perf_counter()
    try:
        result = stage.run(ctx)
        elapsed = time.perf_counter() - start
        manifest.record_stage(name, ctx.run_dir, result.outputs, result.metrics, elapsed)
    except Exception as exc:
        raise StageError(name, exc) from exc
    logger.info(f"Stage {name}: done in {elapsed:.1f}s")


def run_experiment(config: ExperimentConfig, run_dir: Optional[Path] = None,
                   stages: Optional[Iterable[str]] = None, force: bool = False,
                   progress: bool = False) -> Path:
    """
    Execute `stages` (default: config.stages) in pipeline order.

    Returns:
        the run directory

    Raises:
        StageError: the first failing stage; the manifest is still written
            with status "failed"
    """
    config.check()
    run_dir = Path(run_dir) if run_dir is not None else config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    layout = RunLayout(run_dir)
    ctx = RunContext(config, run_dir, force=force, progress=progress)
    manifest = RunManifest.load_or_new(layout.manifest, config)
    selected = list(stages) if stages is not None else list(config.stages)
    ordered = [s for s in ALL_STAGES if s in selected]

    logger.info("=" * 60)
    logger.info(f"Experiment '{config.name}' (run id {config.run_id[:12]}, seed {config.seed})")
    logger.info(f"Run directory: {run_dir}")
    logger.info(f"Stages: {', '.join(ordered)}")
    logger.info("=" * 60)

    manifest.status = "running"
    manifest.failed_stage = None
    manifest.error = None
    try:
        for name in ordered:
            run_stage(name, ctx, manifest)
            manifest.write(layout.manifest)
    except StageError as exc:
        manifest.status = "failed"
        manifest.failed_stage = exc.stage
        manifest.error = str(exc)
        manifest.finished = datetime.now().isoformat(timespec="seconds")
        manifest.write(layout.manifest)
        logger.error(f"Stage {exc.stage}: FAILED ({exc.cause})")
        raise

    manifest.status = "complete"
    manifest.finished = datetime.now().isoformat(timespec="seconds")
    manifest.write(layout.manifest)
    logger.info("=" * 60)
    logger.info(f"Experiment '{config.name}' complete")
    logger.info("=" * 60)
    return run_dir
