"""Two-stage training: masked reconstruction, then multi-task prompt tuning."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from . import prompting as P
from .backbone import BackboneConfig, STModel
from .tokenizer import DYNAMIC_SCALE, TokenizerConfig


class NumericError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_reg: float = 1.0
    lambda_tim: float = 1.0
    lambda_pt_reg: float = 1.0
    lambda_pt_gen: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        if min(self.lambda_reg, self.lambda_tim, self.lambda_pt_reg, self.lambda_pt_gen) < 0:
            raise ValueError("loss weights must be >= 0")

    def mrt_weights(self) -> tuple[float, float, float]:
        w = (1.0, self.lambda_reg, self.lambda_tim)
        if self.normalize:
            s = sum(w)
            return tuple(x / s for x in w)
        return w

    def pt_weights(self) -> tuple[float, float, float]:
        w = (1.0, self.lambda_pt_reg, self.lambda_pt_gen)
        if self.normalize:
            s = sum(w)
            return tuple(x / s for x in w)
        return w


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    mask_ratio: float = 0.15
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    serial_mode: bool = True
    series_length: int = 12
    series_per_segment: int = 4
    recovery_ratio: float = 0.90
    task_mix: dict[str, float] = field(
        default_factory=lambda: {
            "next_hop": 1.0,
            "classification": 1.0,
            "tte": 1.0,
            "one_step": 1.0,
            "multi_step": 1.0,
            "imputation": 1.0,
            "recovery": 1.0,
        }
    )

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainingConfig":
        raw = dict(raw)
        weights = LossWeights(**raw.pop("weights", {}))
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        known["weights"] = weights
        return cls(**known)


@dataclass
class MaskPlan:
    k: int
    positions: list[int]
    seed: int

    def __post_init__(self):
        if len(self.positions) != self.k or len(set(self.positions)) != self.k:
            raise ValueError("positions must be k distinct indices")


def plan_masks(length: int, k: int, seed: int) -> MaskPlan:
    if not 0 <= k <= length:
        raise ValueError(f"K={k} outside [0, {length}]")
    rng = np.random.default_rng(seed)
    positions = sorted(int(p) for p in rng.choice(length, size=k, replace=False))
    return MaskPlan(k, positions, seed)


def compute_world_stats(world: D.World, train_idx: list[int]) -> P.WorldStats:
    """Coarse supplement ranges and interval standardization from the train split."""
    distances, velocities, departures, intervals = [], [], [], []
    for i in train_idx:
        seq = world.trajectories[i]
        dist = sum(world.network.segments[s].length_m for s in seq.segment_ids)
        duration = seq.timestamps[-1] - seq.timestamps[0]
        distances.append(dist)
        departures.append(seq.timestamps[0] % 86400)
        if duration > 0:
            velocities.append(dist / duration * 3.6)
        intervals.extend(seq.intervals[1:])
    intervals = np.asarray(intervals if intervals else [0.0])

    def edges(values):
        if not values:
            return (0.0, 0.0)
        q = np.quantile(values, [1 / 3, 2 / 3])
        return (float(q[0]), float(q[1]))

    return P.WorldStats(
        distance_edges=edges(distances),
        velocity_edges=edges(velocities),
        departure_edges=edges(departures),
        interval_mean=float(intervals.mean()),
        interval_std=float(intervals.std()) or 1.0,
    )


def standardize_interval(delta_s, stats: P.WorldStats):
    return (delta_s - stats.interval_mean) / stats.interval_std


def destandardize_interval(x, stats: P.WorldStats):
    return x * stats.interval_std + stats.interval_mean


def sample_values_for(seq: D.STUnitSequence, net: D.RoadNetwork) -> dict[str, float]:
    dist = sum(net.segments[s].length_m for s in seq.segment_ids)
    duration = max(1, seq.timestamps[-1] - seq.timestamps[0])
    return {
        "distance": dist,
        "velocity": dist / duration * 3.6,
        "departure_time": seq.timestamps[0] % 86400,
    }


# ---------------------------------------------------------------------------
# Masked reconstruction (Stage 1)


def reconstruction_targets(seq: D.STUnitSequence, positions: list[int], stats: P.WorldStats):
    """Per masked unit: segment id, scaled dynamic vector, standardized interval."""
    seg = torch.as_tensor([seq.segment_ids[p] for p in positions], dtype=torch.long)
    dyn_scale = DYNAMIC_SCALE.to(torch.get_default_dtype())
    if positions and seq.units[positions[0]].dynamic is not None:
        dyn = torch.stack(
            [
                torch.as_tensor(seq.units[p].dynamic, dtype=torch.get_default_dtype())
                for p in positions
            ]
        ) / dyn_scale
    else:
        dyn = None
    if seq.kind == "traffic_series":
        # series steps are a fixed slice apart; plain scaling avoids trajectory-stat blowup
        tim_vals = [seq.intervals[p] / D.SLICE_LENGTH_S for p in positions]
    else:
        tim_vals = [standardize_interval(seq.intervals[p], stats) for p in positions]
    tim = torch.as_tensor(tim_vals, dtype=torch.get_default_dtype())
    return seg, dyn, tim


def mask_for_reconstruction(
    seq_tokens: torch.Tensor,
    seq: D.STUnitSequence,
    k: int,
    seed: int,
    stats: P.WorldStats,
    bank: P.PlaceholderBank,
    vocab: P.Vocabulary,
):
    plan = plan_masks(len(seq), k, seed)
    masked, saved = P.apply_masks(seq_tokens, plan.positions, bank.mask_vec)
    prompt = P.PromptInstance(
        task_id="reconstruction",
        text_ids=[],
        st_tokens=masked,
        placeholder_kinds=P.placeholder_sequence("reconstruction_pair", plan.k),
        mask_positions=plan.positions,
        saved_tokens=saved,
    )
    return prompt, reconstruction_targets(seq, plan.positions, stats)


def mrt_loss(preds: list[tuple], targets: list[tuple], weights: LossWeights):
    """preds: per sample (logits (K,C), reg (K,Dd), tim (K,)); matching targets."""
    w_clas, w_reg, w_tim = weights.mrt_weights()
    comps = {"clas": [], "reg": [], "tim": []}
    for (logits, reg, tim), (seg_t, dyn_t, tim_t) in zip(preds, targets):
        comps["clas"].append(F.cross_entropy(logits, seg_t))
        if dyn_t is not None:
            comps["reg"].append(F.mse_loss(reg, dyn_t))
        comps["tim"].append(F.mse_loss(tim, tim_t))
    out = {k: torch.stack(v).mean() if v else torch.tensor(0.0) for k, v in comps.items()}
    total = w_clas * out["clas"] + w_reg * out["reg"] + w_tim * out["tim"]
    for name, v in list(out.items()) + [("total", total)]:
        if not torch.isfinite(v):
            raise NumericError(f"non-finite {name} loss")
    out["total"] = total
    return total, {k: float(v.detach()) for k, v in out.items()}


def sample_traffic_series(world: D.World, config: TrainingConfig, window: int, rng) -> list[D.STUnitSequence]:
    """Fixed-length per-segment slice windows with enough history for the encoder."""
    series = []
    lo = window
    hi = world.store.num_slices - config.series_length
    if world.store.absent or hi <= lo:
        return series
    for seg in range(world.network.num_segments):
        for k in range(config.series_per_segment):
            start = int(rng.integers(lo, hi))
            series.append(
                D.traffic_series_sequence(
                    world.network, world.store, seg, start, config.series_length,
                    seq_id=seg * config.series_per_segment + k,
                )
            )
    return series


def _mrt_forward(model: STModel, seqs, world, stats, vocab, seed_base, mask_ratio):
    tokens = model.tokenizer.tokenize_sequences(seqs, world.network, world.store)
    prompts, targets = [], []
    for j, (seq, toks) in enumerate(zip(seqs, tokens)):
        k = max(1, round(mask_ratio * len(seq)))
        prompt, target = mask_for_reconstruction(
            toks, seq, k, seed_base + j, stats, model.bank, vocab
        )
        prompts.append(prompt)
        targets.append(target)
    outs = model.forward_prompts(prompts)
    preds = []
    n_seg = world.network.num_segments
    for out in outs:
        z_clas, z_reg = out.Z[0::2], out.Z[1::2]
        logits, reg, tim = model.heads.decode_st_unit(z_clas, z_reg)
        preds.append((logits[:, :n_seg], reg, tim))
    return preds, targets


def masked_segment_accuracy(preds, targets) -> float:
    hits = total = 0
    for (logits, _, _), (seg_t, _, _) in zip(preds, targets):
        hits += int((logits.argmax(-1) == seg_t).sum())
        total += len(seg_t)
    return hits / max(1, total)


def build_model(world: D.World, vocab: P.Vocabulary,
                tokenizer_config=None, backbone_config=None) -> STModel:
    n_classes = max(world.network.num_segments, world.config.num_users)
    return STModel(
        num_segments=world.network.num_segments,
        text_vocab_size=len(vocab),
        n_classes=n_classes,
        tokenizer_config=tokenizer_config,
        backbone_config=backbone_config,
    )


def _apply_thread_limits(config: TrainingConfig):
    cap = os.environ.get("STFOUNDRY_THREADS")
    if config.serial_mode:
        torch.set_num_threads(1)
    elif cap:
        torch.set_num_threads(max(1, int(cap)))


@dataclass
class StageResult:
    model: STModel
    trace: list[dict]
    stats: P.WorldStats
    final_metrics: dict


def run_mrt_stage(
    world: D.World,
    config: TrainingConfig,
    tokenizer_config: Optional[TokenizerConfig] = None,
    backbone_config: Optional[BackboneConfig] = None,
    model: Optional[STModel] = None,
) -> StageResult:
    _apply_thread_limits(config)
    torch.manual_seed(config.seed)
    registry = P.InstructionRegistry()
    vocab = P.Vocabulary(registry)
    if model is None:
        model = build_model(world, vocab, tokenizer_config, backbone_config)
    split = D.split_dataset(len(world.trajectories), (0.6, 0.2, 0.2), seed=config.seed)
    stats = compute_world_stats(world, split.train)

    rng = np.random.default_rng(config.seed)
    window = model.tokenizer.config.window
    train_seqs = [world.trajectories[i] for i in split.train]
    train_seqs += sample_traffic_series(world, config, window, rng)
    valid_seqs = [world.trajectories[i] for i in split.valid]

    params = list(model.trainable_parameters("mrt").values())
    opt = torch.optim.AdamW(params, lr=config.lr)
    trace = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_seqs))
        epoch_comps = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            seqs = [train_seqs[i] for i in idx]
            seed_base = config.seed * 1_000_003 + epoch * 10_007 + start
            try:
                preds, targets = _mrt_forward(
                    model, seqs, world, stats, vocab, seed_base, config.mask_ratio
                )
                loss, comps = mrt_loss(preds, targets, config.weights)
            except NumericError:
                model.load_state_dict(last_good)
                raise
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_comps.append(comps)
        mean_comps = {
            k: float(np.mean([c[k] for c in epoch_comps])) for k in epoch_comps[0]
        }
        trace.append({"epoch": epoch + 1, **mean_comps})
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

    with torch.no_grad():
        preds, targets = _mrt_forward(
            model, valid_seqs, world, stats, vocab, config.seed + 99, config.mask_ratio
        ) if valid_seqs else ([], [])
        acc = masked_segment_accuracy(preds, targets)
    return StageResult(model, trace, stats, {"masked_segment_accuracy": acc})


# ---------------------------------------------------------------------------
# Prompt tuning (Stage 2)


@dataclass
class TaskBatch:
    task_id: str
    prompts: list[P.PromptInstance]
    targets: list[dict]      # per prompt: {"cls": LongTensor, "reg": Tensor, "tim": Tensor}
    reg_head: str = "state"  # which head decodes REG outputs: "state" | "time"
    rejected: int = 0


def build_task_batch(
    task_id: str,
    seqs: list[D.STUnitSequence],
    world: D.World,
    stats: P.WorldStats,
    model: STModel,
    vocab: P.Vocabulary,
    registry: P.InstructionRegistry,
    rng,
    config: TrainingConfig,
    recovery_ratio: Optional[float] = None,
) -> TaskBatch:
    net, store = world.network, world.store
    dyn_scale = DYNAMIC_SCALE.to(torch.get_default_dtype())
    horizon = P.MULTI_STEP_HORIZON

    usable, rejected = [], 0
    min_len = {"next_hop": 2, "recovery": 3, "multi_step": 2 * horizon, "one_step": 2}.get(task_id, 1)
    for s in seqs:
        if len(s) >= min_len:
            usable.append(s)
        else:
            rejected += 1
    if not usable:
        return TaskBatch(task_id, [], [], rejected=rejected)

    zero_time = task_id == "tte"
    tokens = model.tokenizer.tokenize_sequences(usable, net, store, zero_time=zero_time)
    prompts, targets = [], []
    reg_head = "time" if task_id == "tte" else "state"
    for seq, toks in zip(usable, tokens):
        values = sample_values_for(seq, net) if seq.kind == "trajectory" else None
        common = dict(registry=registry, vocab=vocab, bank=model.bank, stats=stats,
                      sample_values=values)
        if task_id == "next_hop":
            prompt = P.build_prompt(task_id, toks[:-1], seq.kind, **common)
            target = {"cls": torch.tensor([seq.segment_ids[-1]], dtype=torch.long)}
        elif task_id == "classification":
            prompt = P.build_prompt(task_id, toks, seq.kind, **common)
            target = {"cls": torch.tensor([seq.label], dtype=torch.long)}
        elif task_id == "tte":
            prompt = P.build_prompt(task_id, toks, seq.kind, **common)
            tim = torch.as_tensor(
                [standardize_interval(d, stats) for d in seq.intervals],
                dtype=torch.get_default_dtype(),
            )
            target = {"tim": tim}
        elif task_id in ("one_step", "multi_step"):
            h = 1 if task_id == "one_step" else horizon
            n_ctx = horizon if task_id == "multi_step" else len(seq) - 1
            future = torch.stack(
                [
                    torch.as_tensor(u.dynamic, dtype=torch.get_default_dtype())
                    for u in seq.units[n_ctx : n_ctx + h]
                ]
            ) / dyn_scale
            prompt = P.build_prompt(task_id, toks[:n_ctx], seq.kind, horizon=h, **common)
            target = {"reg": future}
        elif task_id == "imputation":
            pos = P.imputation_mask_positions(len(seq), rng)
            masked_vals = torch.stack(
                [
                    torch.as_tensor(seq.units[p].dynamic, dtype=torch.get_default_dtype())
                    for p in pos
                ]
            ) / dyn_scale
            prompt = P.build_prompt(task_id, toks, seq.kind, mask_positions=pos, **common)
            target = {"reg": masked_vals}
        elif task_id == "recovery":
            ratio = recovery_ratio if recovery_ratio is not None else config.recovery_ratio
            pos = P.recovery_mask_positions(len(seq), ratio, rng)
            prompt = P.build_prompt(task_id, toks, seq.kind, mask_positions=pos, **common)
            target = {"cls": torch.tensor([seq.segment_ids[p] for p in pos], dtype=torch.long)}
        else:
            raise P.RegistryError(f"task {task_id!r} is not tunable")
        prompts.append(prompt)
        targets.append(target)
    return TaskBatch(task_id, prompts, targets, reg_head=reg_head, rejected=rejected)


def task_output_kind(task_id: str) -> str:
    return {
        "next_hop": "classification",
        "classification": "classification",
        "tte": "regression",
        "one_step": "regression",
        "multi_step": "regression",
        "imputation": "regression",
        "recovery": "generation",
    }[task_id]


def batch_task_loss(model: STModel, batch: TaskBatch, n_classes_for: dict[str, int]):
    """Mean per-sample loss of one task batch (single CE or MSE component)."""
    outs = model.forward_prompts(batch.prompts)
    losses = []
    for out, prompt, target in zip(outs, batch.prompts, batch.targets):
        if "cls" in target:
            logits = model.heads.decode_classification(out.Z)
            logits = logits[:, : n_classes_for[batch.task_id]]
            losses.append(F.cross_entropy(logits, target["cls"]))
        elif "reg" in target:
            losses.append(F.mse_loss(model.heads.decode_regression(out.Z), target["reg"]))
        else:
            losses.append(F.mse_loss(model.heads.decode_time(out.Z), target["tim"]))
    loss = torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss in task {batch.task_id}")
    return loss


def pt_loss(task_losses: dict[str, torch.Tensor], weights: LossWeights):
    """L = L_CLAS + w_reg * L_REG + w_gen * L_GEN over present task kinds."""
    _, w_reg, w_gen = weights.pt_weights()
    zero = torch.tensor(0.0)
    by_kind = {"classification": [], "regression": [], "generation": []}
    for task_id, loss in task_losses.items():
        by_kind[task_output_kind(task_id)].append(loss)
    l_clas = torch.stack(by_kind["classification"]).mean() if by_kind["classification"] else zero
    l_reg = torch.stack(by_kind["regression"]).mean() if by_kind["regression"] else zero
    l_gen = torch.stack(by_kind["generation"]).mean() if by_kind["generation"] else zero
    total = l_clas + w_reg * l_reg + w_gen * l_gen
    if not torch.isfinite(total):
        raise NumericError("non-finite prompt-tuning loss")
    comps = {"clas": l_clas, "reg": l_reg, "gen": l_gen, "total": total}
    return total, {k: float(v.detach()) for k, v in comps.items()}


def task_datasets(world: D.World, config: TrainingConfig, window: int, split: D.DatasetSplit, rng):
    """Per-task (train, valid) sample pools."""
    train_traj = [world.trajectories[i] for i in split.train]
    valid_traj = [world.trajectories[i] for i in split.valid]
    series = sample_traffic_series(world, config, window, rng)
    n_sv = max(1, len(series) // 5)
    train_series, valid_series = series[n_sv:], series[:n_sv]
    pools = {}
    for task_id in config.task_mix:
        if task_id in ("one_step", "multi_step", "imputation"):
            pools[task_id] = (train_series, valid_series)
        else:
            pools[task_id] = (train_traj, valid_traj)
    return pools


def run_prompt_tuning(
    model: STModel,
    world: D.World,
    config: TrainingConfig,
    stats: P.WorldStats,
) -> StageResult:
    if not config.task_mix:
        raise ValueError("task_mix must list at least one task")
    _apply_thread_limits(config)
    torch.manual_seed(config.seed + 1)
    registry = P.InstructionRegistry()
    vocab = P.Vocabulary(registry)
    rng = np.random.default_rng(config.seed + 1)
    split = D.split_dataset(len(world.trajectories), (0.6, 0.2, 0.2), seed=config.seed)
    pools = task_datasets(world, config, model.tokenizer.config.window, split, rng)
    n_classes_for = {
        t: world.config.num_users if t == "classification" else world.network.num_segments
        for t in config.task_mix
    }

    params = list(model.trainable_parameters("prompt_tuning").values())
    opt = torch.optim.AdamW(params, lr=config.lr)

    # round-robin schedule weighted by mix proportions
    total = sum(config.task_mix.values())
    schedule = []
    for task_id, w in config.task_mix.items():
        schedule += [task_id] * max(1, round(10 * w / total))

    trace = []
    for epoch in range(config.epochs):
        cursors = {t: 0 for t in config.task_mix}
        orders = {t: rng.permutation(len(pools[t][0])) for t in config.task_mix}
        steps = max(len(pools[t][0]) for t in config.task_mix) // config.batch_size + 1
        epoch_losses = {t: [] for t in config.task_mix}
        for step in range(steps):
            task_losses = {}
            task_id = schedule[step % len(schedule)]
            pool = pools[task_id][0]
            if not pool:
                continue
            i0 = cursors[task_id]
            idx = [int(orders[task_id][(i0 + j) % len(pool)]) for j in range(config.batch_size)]
            cursors[task_id] = (i0 + config.batch_size) % len(pool)
            batch = build_task_batch(
                task_id, [pool[i] for i in idx], world, stats, model, vocab, registry, rng, config
            )
            if not batch.prompts:
                continue
            task_losses[task_id] = batch_task_loss(model, batch, n_classes_for)
            loss, _ = pt_loss(task_losses, config.weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses[task_id].append(float(task_losses[task_id].detach()))

        # per-task validation losses
        with torch.no_grad():
            val_rng = np.random.default_rng(config.seed + 7)
            for task_id in config.task_mix:
                pool = pools[task_id][1]
                if not pool:
                    continue
                batch = build_task_batch(
                    task_id, pool[: 4 * config.batch_size], world, stats, model, vocab,
                    registry, val_rng, config,
                )
                v = float(batch_task_loss(model, batch, n_classes_for))
                trace.append(
                    {
                        "epoch": epoch + 1,
                        "task": task_id,
                        "train_loss": float(np.mean(epoch_losses[task_id]))
                        if epoch_losses[task_id]
                        else math.nan,
                        "valid_loss": v,
                    }
                )
    return StageResult(model, trace, stats, {})


# ---------------------------------------------------------------------------
# Checkpoints and traces


def save_checkpoint(path, model: STModel, world_config: D.WorldConfig,
                    stats: P.WorldStats, training_config: TrainingConfig):
    payload = {
        "state_dict": model.state_dict(),
        "group_hashes": {g: model.group_hash(g) for g in ("base", "tokenizer", "lora", "heads", "placeholders")},
        "world_config": asdict(world_config),
        "tokenizer_config": asdict(model.tokenizer.config),
        "backbone_config": asdict(model.backbone.config),
        "training_config": {**asdict(training_config)},
        "stats": asdict(stats),
        "num_segments": model.tokenizer.num_segments,
        "text_vocab_size": model.backbone.text_embedding.num_embeddings,
        "n_classes": model.heads.n_classes,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, weights_only=False)
    tok_cfg = TokenizerConfig(**payload["tokenizer_config"])
    bb_cfg = BackboneConfig(**payload["backbone_config"])
    model = STModel(
        num_segments=payload["num_segments"],
        text_vocab_size=payload["text_vocab_size"],
        n_classes=payload["n_classes"],
        tokenizer_config=tok_cfg,
        backbone_config=bb_cfg,
    )
    model.load_state_dict(payload["state_dict"])
    stats = P.WorldStats(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in payload["stats"].items()
    })
    return model, stats, payload


def write_trace_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "task", "component", "value"])
        for row in rows:
            task = row.get("task", "mrt")
            for key, val in row.items():
                if key in ("epoch", "task"):
                    continue
                w.writerow([row["epoch"], task, key, repr(float(val))])
