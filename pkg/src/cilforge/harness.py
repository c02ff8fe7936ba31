"""Run one learner over one class-incremental stream.

Each task: observe (train, then refresh memory), evaluate on every class seen
so far, checkpoint.  Memory is refreshed before evaluation because iCaRL's
nearest-mean classifier reads its class means from the exemplars.
"""

from __future__ import annotations

import json
import logging
import pickle
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, build_backbone
from .config import RunConfig
from .datastream import PRNG_ID, DataManager, DatasetPair, load_table_dataset, synth_blobs
from .evaluator import AccuracyMatrix, RunReport, emit_report
from .learners import Learner, LearnerSettings, get_learner
from .memory import MemoryPolicy

log = logging.getLogger(__name__)

CKPT_MAGIC = b"cilforge-ckpt v1\n"

HARNESS_DECISIONS = (
    "stream: classes relabeled once by shuffled-order position; no per-task remap",
    "protocol: memory update precedes evaluation of the same stage",
    "kd: temperature-scaled KL with T^2 factor, T from optimization.temperature",
    "backbone: toy pre-training on auxiliary blobs stands in for ViT-B/16 weights",
)


class HarnessError(RuntimeError):
    pass


class CheckpointError(HarnessError):
    pass


def load_data(cfg: RunConfig) -> DatasetPair:
    ds = cfg.dataset
    if ds.from_files:
        return DatasetPair(load_table_dataset(ds.train_path), load_table_dataset(ds.test_path))
    return synth_blobs(ds.num_classes, ds.per_class, ds.dim, spread=ds.spread, seed=ds.seed,
                       test_per_class=ds.test_per_class)


def build_stream(cfg: RunConfig) -> DataManager:
    return DataManager(load_data(cfg), cfg.init_cls, cfg.increment, seed=cfg.seed, shuffle=cfg.shuffle)


def build_learner(cfg: RunConfig, dm: DataManager) -> Learner:
    spec = BackboneSpec(kind=cfg.backbone_type, **{"input_dim": dm.data.train.dim, **cfg.backbone})
    policy = MemoryPolicy(cfg.fixed_memory, cfg.memory_size, cfg.memory_per_class)
    settings = LearnerSettings(build_backbone(spec), dm.nb_tasks, cfg.seed, cfg.optimization,
                               dict(cfg.model_specific), policy)
    return get_learner(cfg.model_name, settings)


def provenance(cfg: RunConfig, learner: Learner) -> dict:
    return {
        "seed": cfg.seed,
        "prng": PRNG_ID,
        "config_hash": cfg.digest(),
        "learner": getattr(learner, "display_name", learner.name),
        "backbone": BackboneSpec(kind=cfg.backbone_type).resolved_kind,
        "decisions": list(HARNESS_DECISIONS) + learner.decisions(),
    }


def save_checkpoint(path, cfg: RunConfig, task: int, learner: Learner,
                    matrix: AccuracyMatrix) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.digest(), "task": task, "model_name": cfg.model_name}
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        pickle.dump({"learner": learner, "matrix": asdict(matrix)}, fh,
                    protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a cilforge v1 checkpoint")
        try:
            meta = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: corrupt checkpoint header") from e
        return meta, pickle.load(fh)


def run(cfg: RunConfig, out_dir=None, resume=None, checkpoint: bool = True,
        stop_after: int | None = None) -> RunReport:
    """Execute the stream and return (and, with ``out_dir``, write) the report.

    ``stop_after`` ends the run after that task index, as an interruption would.
    """
    t0 = time.perf_counter()
    dm = build_stream(cfg)
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    if resume is not None:
        meta, payload = read_checkpoint(resume)
        if meta["config_hash"] != cfg.digest():
            raise CheckpointError(f"{resume} was written for a different config")
        learner: Learner = payload["learner"]
        learner._store.restore_inputs(dm.data.train)
        matrix = AccuracyMatrix(**payload["matrix"])
        start = meta["task"] + 1
        log.info("resuming %s after task %d", cfg.model_name, meta["task"])
    else:
        learner = build_learner(cfg, dm)
        matrix = AccuracyMatrix()

    task_of = np.concatenate([np.full(dm.task_size(t), t) for t in range(dm.nb_tasks)])
    for t in range(start, dm.nb_tasks):
        try:
            learner.observe(t, dm.get_dataset(t, "train"), dm.task_size(t))
            test = dm.get_dataset(t, "test", "cumulative")
            acc = matrix.record(learner.classify(test.x), test.y, task_of, learner.total_classes)
        except Exception as e:
            raise HarnessError(f"task {t} ({cfg.model_name}): {type(e).__name__}: {e}") from e
        log.info("task %d: %d classes, accuracy %.2f", t, learner.total_classes, acc)
        if checkpoint and out is not None:
            save_checkpoint(out / "checkpoints" / f"task{t}.ckpt", cfg, t, learner, matrix)
        if stop_after is not None and t >= stop_after:
            break

    report = RunReport.from_matrix(cfg.to_dict(), matrix, provenance(cfg, learner),
                                   wall_clock=time.perf_counter() - t0)
    if out is not None:
        emit_report(report, out)
    return report
