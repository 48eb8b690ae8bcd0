"""Task evaluation: ranking, regression, and classification metrics plus report files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import data as D
from . import prompting as P
from . import training as T
from .backbone import STModel
from .tokenizer import DYNAMIC_SCALE


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    task_id: str
    metrics: dict[str, float]
    n_instances: int
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "task_id": self.task_id,
                "metrics": self.metrics,
                "n_instances": self.n_instances,
                "notes": self.notes,
            },
            sort_keys=True,
            indent=2,
        )


def _rank_of_true(candidate_ids: Sequence[int], scores: Sequence[float], true_id) -> int:
    """1-based rank of the true candidate; ties broken by ascending candidate id."""
    if true_id not in set(candidate_ids):
        raise MetricError(f"true id {true_id} not among candidates")
    order = sorted(range(len(candidate_ids)), key=lambda i: (-scores[i], candidate_ids[i]))
    ranked = [candidate_ids[i] for i in order]
    return ranked.index(true_id) + 1


def ranking_metrics(
    instances: list[tuple[Sequence[int], Sequence[float], int]],
    ks: Sequence[int] = (1, 5, 10),
) -> dict[str, float]:
    """Single-relevant retrieval metrics; each instance is (candidate_ids, scores, true_id)."""
    if not instances:
        raise MetricError("no ranking instances")
    ranks = [_rank_of_true(c, s, t) for c, s, t in instances]
    out = {"ACC": float(np.mean([r == 1 for r in ranks]))}
    for k in ks:
        out[f"MRR@{k}"] = float(np.mean([1.0 / r if r <= k else 0.0 for r in ranks]))
        out[f"NDCG@{k}"] = float(
            np.mean([1.0 / math.log2(r + 1) if r <= k else 0.0 for r in ranks])
        )
        out[f"HR@{k}"] = float(np.mean([r <= k for r in ranks]))
    return out


def regression_metrics(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise MetricError("prediction/truth shape mismatch")
    if pred.size == 0:
        raise MetricError("no regression points")
    err = pred - truth
    out = {
        "MAE": float(np.abs(err).mean()),
        "RMSE": float(np.sqrt((err**2).mean())),
    }
    nz = truth != 0
    if not nz.any():
        raise MetricError("MAPE undefined: every ground-truth value is zero")
    out["MAPE"] = float(np.abs(err[nz] / truth[nz]).mean() * 100.0)
    out["mape_excluded"] = int((~nz).sum())
    return out


def auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both classes present")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def classification_metrics(
    pred: np.ndarray, truth: np.ndarray, scores: Optional[np.ndarray] = None
) -> dict[str, float]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise MetricError("bad classification inputs")
    classes = sorted(set(truth.tolist()) | set(pred.tolist()))
    binary = set(truth.tolist()) <= {0, 1} and set(pred.tolist()) <= {0, 1}
    acc = float((pred == truth).mean())

    def f1_recall(cls):
        tp = int(((pred == cls) & (truth == cls)).sum())
        fp = int(((pred == cls) & (truth != cls)).sum())
        fn = int(((pred != cls) & (truth == cls)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return f1, rec, tp, fp, fn

    if binary:
        f1, _, _, _, _ = f1_recall(1)
        out = {"ACC": acc, "F1": f1}
        if scores is not None:
            out["AUC"] = auc_binary(scores, truth)
        return out
    if scores is not None:
        raise MetricError("AUC is defined here for binary labels only")
    per = [f1_recall(c) for c in classes]
    tp = sum(p[2] for p in per)
    fp = sum(p[3] for p in per)
    fn = sum(p[4] for p in per)
    micro_p = tp / (tp + fp) if tp + fp else 0.0
    micro_r = tp / (tp + fn) if tp + fn else 0.0
    micro_f1 = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    return {
        "ACC": acc,
        "Micro-F1": micro_f1,
        "Macro-F1": float(np.mean([p[0] for p in per])),
        "Macro-Recall": float(np.mean([p[1] for p in per])),
    }


def masked_regression_metrics(pred, truth, mask) -> dict[str, float]:
    """Imputation-style metrics: only masked positions count."""
    mask = np.asarray(mask, dtype=bool)
    return regression_metrics(np.asarray(pred)[mask], np.asarray(truth)[mask])


def masked_ranking_metrics(
    candidate_ids: Sequence[int],
    score_rows: Sequence[Sequence[float]],
    true_ids: Sequence[int],
    mask,
    ks: Sequence[int] = (1, 5, 10),
) -> dict[str, float]:
    """Recovery-style metrics: one ranking instance per masked position."""
    mask = np.asarray(mask, dtype=bool)
    instances = [
        (list(candidate_ids), list(score_rows[i]), true_ids[i])
        for i in range(len(true_ids))
        if mask[i]
    ]
    return ranking_metrics(instances, ks)


# ---------------------------------------------------------------------------
# Model-level evaluation


def _cls_ranking_instances(model: STModel, batch: T.TaskBatch, n_classes: int):
    instances = []
    with torch.no_grad():
        outs = model.forward_prompts(batch.prompts)
        for out, target in zip(outs, batch.targets):
            logits = model.heads.decode_classification(out.Z)[:, :n_classes]
            for row, true_id in zip(logits, target["cls"]):
                instances.append((list(range(n_classes)), row.tolist(), int(true_id)))
    return instances


def _regression_pairs(model: STModel, batch: T.TaskBatch, stats: P.WorldStats):
    preds, truths = [], []
    dyn_scale = DYNAMIC_SCALE.numpy()
    with torch.no_grad():
        outs = model.forward_prompts(batch.prompts)
        for out, target in zip(outs, batch.targets):
            if batch.reg_head == "time":
                p = model.heads.decode_time(out.Z).numpy()
                preds.append(T.destandardize_interval(p, stats) / 60.0)
                truths.append(T.destandardize_interval(target["tim"].numpy(), stats) / 60.0)
            else:
                preds.append(model.heads.decode_regression(out.Z).numpy() * dyn_scale)
                truths.append(target["reg"].numpy() * dyn_scale)
    return np.concatenate([p.ravel() for p in preds]), np.concatenate([t.ravel() for t in truths])


def downsample_sequence(seq: D.STUnitSequence) -> D.STUnitSequence:
    """Every-other-point variant used as the retrieval ground truth pairing."""
    keep = list(range(0, len(seq), 2))
    if len(keep) < 2:
        keep = [0, min(1, len(seq) - 1)]
    return D.STUnitSequence(
        kind=seq.kind,
        units=[seq.units[i] for i in keep],
        segment_ids=[seq.segment_ids[i] for i in keep],
        timestamps=[seq.timestamps[i] for i in keep],
        label=seq.label,
        seq_id=seq.seq_id,
    )


def sequence_embedding(model: STModel, seq: D.STUnitSequence, world: D.World,
                       vocab: P.Vocabulary, registry: P.InstructionRegistry,
                       stats: P.WorldStats) -> np.ndarray:
    toks = model.tokenizer.tokenize_sequences([seq], world.network, world.store)[0]
    prompt = P.build_prompt("similar_search", toks, seq.kind, registry=registry,
                            vocab=vocab, bank=model.bank, stats=stats,
                            sample_values=None)
    with torch.no_grad():
        out = model.forward_prompts([prompt])[0]
        n_txt = len(prompt.text_ids)
        emb = out.V[n_txt : n_txt + len(seq)].mean(0)
    v = emb.numpy()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def eval_similar_search(model: STModel, world: D.World, stats: P.WorldStats,
                        query_idx: list[int], database_idx: list[int],
                        registry=None, vocab=None) -> MetricReport:
    """Queries are downsampled copies; the matching full trajectory must rank high."""
    registry = registry or P.InstructionRegistry()
    vocab = vocab or P.Vocabulary(registry)
    if len(database_idx) < len(query_idx):
        raise MetricError("database must contain the query targets")
    db_embs, db_ids = [], []
    for i in database_idx:
        seq = world.trajectories[i]
        db_embs.append(sequence_embedding(model, seq, world, vocab, registry, stats))
        db_ids.append(seq.seq_id)
    db = np.stack(db_embs)
    instances = []
    for i in query_idx:
        seq = world.trajectories[i]
        q = sequence_embedding(model, downsample_sequence(seq), world, vocab, registry, stats)
        scores = db @ q
        instances.append((db_ids, scores.tolist(), seq.seq_id))
    metrics = ranking_metrics(instances)
    return MetricReport("similar_search", metrics, len(instances))


def eval_task(
    task_id: str,
    model: STModel,
    world: D.World,
    stats: P.WorldStats,
    config: T.TrainingConfig,
    split: str = "test",
    recovery_ratio: Optional[float] = None,
    seed: int = 0,
) -> MetricReport:
    registry = P.InstructionRegistry()
    vocab = P.Vocabulary(registry)
    rng = np.random.default_rng(seed)
    ds = D.split_dataset(len(world.trajectories), (0.6, 0.2, 0.2), seed=config.seed)
    idx = {"train": ds.train, "valid": ds.valid, "test": ds.test}[split]
    notes = {}
    if split == "train":
        notes["warning"] = "metrics computed on the training split"

    if task_id == "similar_search":
        n_q = max(1, len(idx) // 10)
        report = eval_similar_search(model, world, stats, idx[:n_q], idx, registry, vocab)
        report.notes.update(notes)
        return report

    if task_id in ("one_step", "multi_step", "imputation"):
        pool = T.sample_traffic_series(world, config, model.tokenizer.config.window, rng)
        if not pool:
            raise MetricError(f"world has no traffic dynamics; cannot evaluate {task_id}")
        seqs = pool
    else:
        seqs = [world.trajectories[i] for i in idx]

    batch = T.build_task_batch(
        task_id, seqs, world, stats, model, vocab, registry, rng, config,
        recovery_ratio=recovery_ratio,
    )
    if not batch.prompts:
        raise MetricError(f"no usable instances for task {task_id}")
    notes["rejected_too_short"] = batch.rejected

    if task_id in ("next_hop", "recovery"):
        n = world.network.num_segments
        metrics = ranking_metrics(_cls_ranking_instances(model, batch, n))
        if task_id == "recovery":
            notes["mask_ratio"] = recovery_ratio if recovery_ratio is not None else config.recovery_ratio
    elif task_id == "classification":
        with torch.no_grad():
            outs = model.forward_prompts(batch.prompts)
            logits = torch.stack(
                [model.heads.decode_classification(o.Z)[0, : world.config.num_users] for o in outs]
            )
        pred = logits.argmax(-1).numpy()
        truth = np.array([int(t["cls"][0]) for t in batch.targets])
        scores = logits[:, 1].numpy() if world.config.num_users == 2 else None
        metrics = classification_metrics(pred, truth, scores)
    elif task_id in ("tte", "one_step", "multi_step", "imputation"):
        pred, truth = _regression_pairs(model, batch, stats)
        metrics = regression_metrics(pred, truth)
    else:
        raise MetricError(f"unknown task {task_id!r}")
    return MetricReport(task_id, metrics, len(batch.prompts), notes)


def write_report(report: MetricReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{report.task_id}.json"
    path.write_text(report.to_json() + "\n")
    return path
