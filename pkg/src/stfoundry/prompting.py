"""Task-oriented prompts: instructions, placeholder tokens, mask insertion."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

PAD_ID = 0
UNK_ID = 1

CLS = "CLS"
REG = "REG"

TRAJECTORY = "trajectory"
TRAFFIC_SERIES = "traffic_series"

MULTI_STEP_HORIZON = 6
IMPUTATION_RATIO = 0.25
RECOVERY_RATIOS = (0.85, 0.90, 0.95)


class RegistryError(KeyError):
    pass


class ModalityError(ValueError):
    pass


@dataclass
class TaskSpec:
    task_id: str
    instruction: str
    modality: str                      # trajectory | traffic_series
    output_kind: str                   # classification | regression | generation
    supplement_fields: tuple[str, ...] = ()


# one fixed instruction per task; supplements carry coarse train-split ranges,
# with label-leaking fields excluded (TTE must not see departure time)
DEFAULT_TASKS = [
    TaskSpec("next_hop", "predict the next road segment of the input trajectory on CLS",
             TRAJECTORY, "classification", ("departure_time", "distance", "velocity")),
    TaskSpec("classification", "identify the user class of the input trajectory on CLS",
             TRAJECTORY, "classification", ("departure_time", "distance", "velocity")),
    TaskSpec("tte", "generate a time interval on REG for each step of the input trajectory",
             TRAJECTORY, "regression", ("distance", "velocity")),
    TaskSpec("one_step", "predict the traffic state of the next time slice on REG",
             TRAFFIC_SERIES, "regression", ()),
    TaskSpec("multi_step", "predict the traffic state of the next six time slices on REG",
             TRAFFIC_SERIES, "regression", ()),
    TaskSpec("imputation", "fill in the masked traffic states of the input series on REG",
             TRAFFIC_SERIES, "regression", ()),
    TaskSpec("recovery", "recover the masked road segments of the input trajectory on CLS",
             TRAJECTORY, "generation", ("departure_time", "distance", "velocity")),
    TaskSpec("similar_search", "represent the input trajectory for similarity comparison",
             TRAJECTORY, "comparison", ()),
    TaskSpec("reconstruction", "reconstruct the masked samples of the input sequence",
             TRAJECTORY, "reconstruction", ()),
]


class InstructionRegistry:
    def __init__(self, tasks: Optional[list[TaskSpec]] = None):
        self.tasks = {t.task_id: t for t in (tasks or DEFAULT_TASKS)}

    def get(self, task_id: str) -> TaskSpec:
        if task_id not in self.tasks:
            raise RegistryError(f"unregistered task {task_id!r}")
        return self.tasks[task_id]

    def save(self, path):
        payload = {
            t.task_id: {
                "instruction": t.instruction,
                "supplement_fields": list(t.supplement_fields),
                "modality": t.modality,
                "output_kind": t.output_kind,
            }
            for t in self.tasks.values()
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "InstructionRegistry":
        with open(path) as f:
            payload = json.load(f)
        return cls(
            [
                TaskSpec(tid, v["instruction"], v["modality"], v["output_kind"],
                         tuple(v["supplement_fields"]))
                for tid, v in payload.items()
            ]
        )


_WORD_RE = re.compile(r"[a-z0-9]+")

SUPPLEMENT_BUCKETS = ("low", "medium", "high")


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary over the registered instruction + supplement corpus."""

    def __init__(self, registry: InstructionRegistry):
        corpus = set()
        for t in registry.tasks.values():
            corpus.update(_words(t.instruction))
            for f_ in t.supplement_fields:
                corpus.update(_words(f_))
        corpus.update(SUPPLEMENT_BUCKETS)
        corpus.update(["supplement", "range"])
        self.id_of = {"<pad>": PAD_ID, "<unk>": UNK_ID}
        for w in sorted(corpus):
            self.id_of[w] = len(self.id_of)

    def __len__(self):
        return len(self.id_of)

    def encode(self, text: str) -> list[int]:
        if not text:
            raise ValueError("cannot encode empty text")
        return [self.id_of.get(w, UNK_ID) for w in _words(text)]


@dataclass
class WorldStats:
    """Coarse training-split statistics used to render supplements."""

    distance_edges: tuple[float, float]       # tercile edges, meters
    velocity_edges: tuple[float, float]       # tercile edges, km/h
    departure_edges: tuple[float, float]      # tercile edges, seconds of day
    interval_mean: float                      # per-step interval standardization
    interval_std: float

    def bucket(self, field_name: str, value: float) -> str:
        edges = {
            "distance": self.distance_edges,
            "velocity": self.velocity_edges,
            "departure_time": self.departure_edges,
        }[field_name]
        if value < edges[0]:
            return SUPPLEMENT_BUCKETS[0]
        if value < edges[1]:
            return SUPPLEMENT_BUCKETS[1]
        return SUPPLEMENT_BUCKETS[2]


class PlaceholderBank(nn.Module):
    """The three learnable prompt vectors: [CLS], [REG], and [MASK]."""

    def __init__(self, d_token: int):
        super().__init__()
        self.cls_vec = nn.Parameter(torch.randn(d_token) * 0.02)
        self.reg_vec = nn.Parameter(torch.randn(d_token) * 0.02)
        self.mask_vec = nn.Parameter(torch.randn(d_token) * 0.02)

    def vector(self, kind: str) -> torch.Tensor:
        if kind == CLS:
            return self.cls_vec
        if kind == REG:
            return self.reg_vec
        raise ValueError(f"unknown placeholder kind {kind!r}")

    def stack(self, kinds: list[str]) -> torch.Tensor:
        if not kinds:
            return self.cls_vec.new_zeros((0, self.cls_vec.shape[0]))
        return torch.stack([self.vector(k) for k in kinds])


@dataclass
class PromptInstance:
    task_id: str
    text_ids: list[int]
    st_tokens: torch.Tensor            # (L, d_token), MASK substitutions applied
    placeholder_kinds: list[str]
    mask_positions: list[int] = field(default_factory=list)
    saved_tokens: Optional[torch.Tensor] = None  # originals at masked positions

    def __post_init__(self):
        if len(self.mask_positions) != len(set(self.mask_positions)):
            raise IndexError("duplicate mask positions")

    @property
    def length(self) -> int:
        return len(self.text_ids) + self.st_tokens.shape[0] + len(self.placeholder_kinds)


def placeholder_sequence(task_kind: str, count: int) -> list[str]:
    if count < 0:
        raise ValueError("count must be >= 0")
    if task_kind == "cls":
        return [CLS] * count
    if task_kind == "reg":
        return [REG] * count
    if task_kind == "reconstruction_pair":
        return [CLS, REG] * count
    raise ValueError(f"unknown placeholder kind {task_kind!r}")


def apply_masks(
    st_tokens: torch.Tensor, positions: list[int], mask_vec: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Substitute MASK at the given positions; return (masked, saved originals)."""
    L = st_tokens.shape[0]
    if len(positions) != len(set(positions)):
        raise IndexError("duplicate mask positions")
    for p in positions:
        if not 0 <= p < L:
            raise IndexError(f"mask position {p} outside [0, {L})")
    if not positions:
        return st_tokens, st_tokens.new_zeros((0, st_tokens.shape[1]))
    saved = st_tokens[list(positions)].clone()
    masked = st_tokens.clone()
    masked[list(positions)] = mask_vec
    return masked, saved


def unmask(st_tokens: torch.Tensor, positions: list[int], saved: torch.Tensor) -> torch.Tensor:
    restored = st_tokens.clone()
    if positions:
        restored[list(positions)] = saved
    return restored


def recovery_mask_positions(length: int, ratio: float, rng) -> list[int]:
    """Mask ~ratio of the samples, always keeping the first and last one."""
    if length < 3:
        raise ValueError("recovery needs length >= 3")
    k = min(round(ratio * length), length - 2)
    interior = rng.choice(range(1, length - 1), size=k, replace=False)
    return sorted(int(p) for p in interior)


def imputation_mask_positions(length: int, rng, ratio: float = IMPUTATION_RATIO) -> list[int]:
    k = max(1, int(ratio * length))
    return sorted(int(p) for p in rng.choice(length, size=k, replace=False))


def render_supplement(task: TaskSpec, sample_values: dict[str, float], stats: WorldStats) -> str:
    """Bucketed supplement text; fields are filtered by the task's leakage rules."""
    parts = []
    for f_ in task.supplement_fields:
        if f_ not in sample_values:
            continue
        parts.append(f"{f_.replace('_', ' ')} range {stats.bucket(f_, sample_values[f_])}")
    return " ".join(parts)


def build_prompt(
    task_id: str,
    st_tokens: torch.Tensor,
    seq_kind: str,
    registry: InstructionRegistry,
    vocab: Vocabulary,
    bank: PlaceholderBank,
    stats: Optional[WorldStats] = None,
    sample_values: Optional[dict[str, float]] = None,
    mask_positions: Optional[list[int]] = None,
    horizon: int = MULTI_STEP_HORIZON,
) -> PromptInstance:
    task = registry.get(task_id)
    if task.modality != seq_kind:
        raise ModalityError(
            f"task {task_id} expects {task.modality}, got {seq_kind}"
        )
    L = st_tokens.shape[0]
    mask_positions = list(mask_positions or [])

    if task_id in ("next_hop", "classification"):
        kinds = placeholder_sequence("cls", 1)
    elif task_id == "tte":
        kinds = placeholder_sequence("reg", L)
    elif task_id == "one_step":
        kinds = placeholder_sequence("reg", 1)
    elif task_id == "multi_step":
        kinds = placeholder_sequence("reg", horizon)
    elif task_id == "imputation":
        kinds = placeholder_sequence("reg", len(mask_positions))
    elif task_id == "recovery":
        kinds = placeholder_sequence("cls", len(mask_positions))
    elif task_id == "similar_search":
        kinds = []
    else:
        raise RegistryError(f"task {task_id!r} has no prompt template")

    text = task.instruction
    if stats is not None and sample_values:
        supplement = render_supplement(task, sample_values, stats)
        if supplement:
            text = f"{text} supplement {supplement}"

    saved = None
    if mask_positions:
        st_tokens, saved = apply_masks(st_tokens, mask_positions, bank.mask_vec)
    return PromptInstance(
        task_id=task_id,
        text_ids=vocab.encode(text),
        st_tokens=st_tokens,
        placeholder_kinds=kinds,
        mask_positions=mask_positions,
        saved_tokens=saved,
    )
