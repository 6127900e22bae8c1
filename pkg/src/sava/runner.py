"""Batch driver: frame policies, per-video attacks, result rows, transferability."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attack import AttackResult, mask_from_frames, optimize_perturbation
from .config import AttackConfig
from .data import VideoRecord
from .metrics import TransferMatrix, transfer_from_predictions
from .models import ClassifierSpec, predict
from .selection import select_frames_bo, select_frames_brute

CSV_HEADER = ("id,model,frame_policy,mode,k,success,iterations,ssim_distance,"
              "l21_distance,pred_label,true_label,wall_ms")
COLUMNS = CSV_HEADER.split(",")


def parse_policy(text: str) -> tuple[str, tuple[int, ...]]:
    if text in ("bo", "first", "brute"):
        return text, ()
    if text.startswith("fixed:"):
        try:
            frames = tuple(int(p) for p in text[6:].split(",") if p.strip())
        except ValueError:
            frames = ()
        if frames:
            return "fixed", frames
    raise ValueError(f"frame policy must be bo, first, brute or fixed:<i>, got {text!r}")


def select_mask(X: np.ndarray, y: int, spec: ClassifierSpec, policy: str, k: int,
                cfg: AttackConfig) -> np.ndarray:
    T = X.shape[0]
    kind, frames = parse_policy(policy)
    if not 1 <= k <= T:
        raise ValueError(f"k must lie in [1, {T}], got {k}")
    if kind == "first":
        return mask_from_frames(range(k), T)
    if kind == "fixed":
        if len(frames) == 1:
            frames = tuple(range(frames[0], frames[0] + k))
        return mask_from_frames(frames, T)
    if kind == "brute":
        if k != 1:
            raise ValueError("brute-force selection supports k=1 only")
        return select_frames_brute(X, y, spec, cfg)[0]
    return select_frames_bo(X, y, spec, k, cfg)


@dataclass
class VideoOutcome:
    id: str
    result: AttackResult
    wall_ms: float


def attack_record(rec: VideoRecord, spec: ClassifierSpec, cfg: AttackConfig,
                  policy: str, k: int) -> VideoOutcome:
    t0 = time.perf_counter()
    mask = select_mask(rec.video, rec.label, spec, policy, k, cfg)
    result = optimize_perturbation(rec.video, rec.label, mask, spec, cfg)
    return VideoOutcome(rec.id, result, (time.perf_counter() - t0) * 1000.0)


_WORKER: dict = {}


def _init_worker(spec, cfg, policy, k):
    _WORKER.update(spec=spec, cfg=cfg, policy=policy, k=k)


def _work(rec: VideoRecord) -> VideoOutcome:
    return attack_record(rec, _WORKER["spec"], _WORKER["cfg"], _WORKER["policy"], _WORKER["k"])


def run_attacks(records: Sequence[VideoRecord], spec: ClassifierSpec, cfg: AttackConfig,
                policy: str = "bo", k: int = 1, jobs: int = 1) -> list[VideoOutcome]:
    """Attack every record; outcomes come back in input order whatever ``jobs`` is."""
    parse_policy(policy)
    if jobs <= 1 or len(records) <= 1:
        return [attack_record(r, spec, cfg, policy, k) for r in records]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(spec, cfg, policy, k)) as pool:
        return list(pool.map(_work, records))


def result_rows(outcomes: Sequence[VideoOutcome], model: str, policy: str, mode: str,
                k: int, timing: bool = False) -> list[dict]:
    rows = []
    for o in outcomes:
        r = o.result
        rows.append({
            "id": o.id, "model": model, "frame_policy": policy, "mode": mode, "k": k,
            "success": int(r.success), "iterations": r.iterations,
            "ssim_distance": f"{r.ssim_distance:.10g}", "l21_distance": f"{r.l21_distance:.10g}",
            "pred_label": r.pred_label, "true_label": r.true_label,
            "wall_ms": f"{o.wall_ms:.1f}" if timing else "0",
        })
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class RowResult:
    """The subset of an attack result recoverable from a CSV row."""

    success: bool
    iterations: int
    ssim_distance: float
    l21_distance: float


def read_rows(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or ",".join(reader.fieldnames) != CSV_HEADER:
        raise ValueError(f"unexpected results header {reader.fieldnames}")
    return list(reader)


def row_result(row: dict) -> RowResult:
    return RowResult(row["success"] == "1", int(row["iterations"]),
                     float(row["ssim_distance"]), float(row["l21_distance"]))


def transfer_matrix(models: Sequence[ClassifierSpec], records: Sequence[VideoRecord],
                    cfg: AttackConfig, names: Sequence[str] | None = None,
                    policy: str = "bo", k: int = 1, jobs: int = 1) -> TransferMatrix:
    """White-box attack with each model, then score its successes on every model."""
    if not models:
        raise ValueError("transfer_matrix: need at least one model")
    shape = tuple(models[0].input_shape)
    if any(tuple(m.input_shape) != shape for m in models):
        raise ValueError("transfer_matrix: models must share an input shape")
    names = list(names) if names is not None else [f"m{i}" for i in range(len(models))]
    labels, preds = [], []
    for spec in models:
        wins = [o.result for o in run_attacks(records, spec, cfg, policy, k, jobs) if o.result.success]
        labels.append([r.true_label for r in wins])
        if wins:
            batch = np.stack([r.adversarial for r in wins])
            preds.append([np.atleast_1d(predict(target, batch)).tolist() for target in models])
        else:
            preds.append([[] for _ in models])
    return transfer_from_predictions(names, labels, preds)
