"""Causal transformer backbone with LoRA adapters, task heads, model bundle."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DYNAMIC_DIM
from .prompting import CLS, REG, PlaceholderBank, PromptInstance
from .tokenizer import STTokenizer, TokenizerConfig

VALID_LORA_TARGETS = ("q", "k", "v", "ffn")


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class BackboneConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 512
    attach_rate: float = 1.0           # fraction n of blocks carrying adapters
    lora_rank: int = 8
    lora_alpha: int | None = None      # defaults to rank (scale 1)
    lora_targets: tuple[str, ...] = ("q", "k", "v")

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if not 0.0 < self.attach_rate <= 1.0:
            raise ConfigError("attach_rate must be in (0, 1]")
        for t in self.lora_targets:
            if t not in VALID_LORA_TARGETS:
                raise ConfigError(f"unknown lora target {t!r}")
        if self.lora_alpha is None:
            self.lora_alpha = self.lora_rank

    @property
    def adapted_blocks(self) -> int:
        return math.ceil(self.attach_rate * self.layers)


class LoRAAdapter(nn.Module):
    """Low-rank delta for one frozen projection: scale * B @ A."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: int):
        super().__init__()
        self.a = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
        self.b = nn.Parameter(torch.zeros(d_out, rank))  # zero init: identity at attach
        self.scale = alpha / rank

    def forward(self, x):
        return self.scale * F.linear(F.linear(x, self.a), self.b)


class AdaptedLinear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.adapter: LoRAAdapter | None = None

    def forward(self, x):
        y = self.base(x)
        if self.adapter is not None:
            y = y + self.adapter(x)
        return y


class CausalBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.heads
        self.d_head = d // cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.q = AdaptedLinear(d, d)
        self.k = AdaptedLinear(d, d)
        self.v = AdaptedLinear(d, d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ffn_in = AdaptedLinear(d, cfg.d_ff)
        self.ffn_out = nn.Linear(cfg.d_ff, d)

    def forward(self, x, causal_mask):
        h = self.ln1(x)
        B, L, _ = h.shape
        q = self.q(h).view(B, L, self.heads, self.d_head).transpose(1, 2)
        k = self.k(h).view(B, L, self.heads, self.d_head).transpose(1, 2)
        v = self.v(h).view(B, L, self.heads, self.d_head).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        att = att.masked_fill(causal_mask[:L, :L], float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, -1)
        x = x + self.out(y)
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.ln2(x))))
        return x


def sinusoidal_table(max_len: int, d_model: int) -> torch.Tensor:
    """Standard sine/cosine position table, shape (max_len, d_model)."""
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=torch.float64)
    angles = pos / torch.pow(10000.0, idx / d_model)
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : d_model // 2])
    return table.to(torch.float32)


class Backbone(nn.Module):
    """Small GPT-style causal transformer over prompt token streams."""

    def __init__(self, text_vocab_size: int, cfg: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg or BackboneConfig()
        c = self.config
        self.text_embedding = nn.Embedding(text_vocab_size, c.d_model)
        self.pos_embedding = nn.Embedding(c.max_len, c.d_model)
        # keep embeddings on the same scale as ST tokens and placeholders
        nn.init.normal_(self.text_embedding.weight, std=0.02)
        # The base is frozen after init, so the position table's initial values
        # are the positional code the adapters must work with. A sinusoidal
        # init gives nearby positions correlated codes, which low-rank
        # attention adapters can exploit for position addressing; a random
        # table would need full-rank maps for the same job.
        with torch.no_grad():
            self.pos_embedding.weight.copy_(0.1 * sinusoidal_table(c.max_len, c.d_model))
        self.blocks = nn.ModuleList(CausalBlock(c) for _ in range(c.layers))
        self.ln_f = nn.LayerNorm(c.d_model)
        # GPT-2-style init: small weights everywhere, residual out-projections
        # scaled down with depth so each block perturbs rather than overwrites
        # the residual stream. With a frozen base this keeps input content
        # linearly recoverable at the output.
        for module in self.blocks.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        resid_std = 0.02 / math.sqrt(2 * c.layers)
        for block in self.blocks:
            nn.init.normal_(block.out.weight, std=resid_std)
            nn.init.normal_(block.ffn_out.weight, std=resid_std)
        mask = torch.triu(torch.ones(c.max_len, c.max_len, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: (B, L, d_model), already embedded and concatenated
        B, L, _ = tokens.shape
        if L > self.config.max_len:
            raise LengthError(f"prompt length {L} exceeds max {self.config.max_len}")
        pos = self.pos_embedding(torch.arange(L, device=tokens.device))
        x = tokens + pos
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.ln_f(x)


def attach_lora(backbone: Backbone, cfg: BackboneConfig | None = None) -> list[LoRAAdapter]:
    """Attach adapters on the first ceil(n*layers) blocks; freeze the base."""
    cfg = cfg or backbone.config
    adapters = []
    for block in list(backbone.blocks)[: cfg.adapted_blocks]:
        targets = {
            "q": [block.q],
            "k": [block.k],
            "v": [block.v],
            "ffn": [block.ffn_in],
        }
        for name in cfg.lora_targets:
            for lin in targets[name]:
                lin.adapter = LoRAAdapter(
                    lin.base.in_features, lin.base.out_features, cfg.lora_rank, cfg.lora_alpha
                )
                adapters.append(lin.adapter)
    for name, p in backbone.named_parameters():
        if ".adapter." not in name:
            p.requires_grad_(False)
    return adapters


class TaskHeads(nn.Module):
    """Shared decoding heads: classification logits, scalar time, dynamic vector."""

    def __init__(self, d_model: int, n_classes: int, dyn_dim: int = DYNAMIC_DIM):
        super().__init__()
        self.n_classes = n_classes
        self.mlp_c = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, n_classes))
        self.mlp_t = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, 1))
        self.mlp_r = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, dyn_dim))

    def decode_classification(self, z: torch.Tensor) -> torch.Tensor:
        return self.mlp_c(z)

    def decode_time(self, z: torch.Tensor) -> torch.Tensor:
        return self.mlp_t(z).squeeze(-1)

    def decode_regression(self, z: torch.Tensor) -> torch.Tensor:
        return self.mlp_r(z)

    def decode_st_unit(self, z_clas: torch.Tensor, z_reg: torch.Tensor):
        return (
            self.decode_classification(z_clas),
            self.decode_regression(z_reg),
            self.decode_time(z_reg),
        )


@dataclass
class BackboneOutput:
    Z: torch.Tensor  # (|tsk|, d_model), aligned with placeholder order
    V: torch.Tensor  # (|txt| + |st|, d_model)


class STModel(nn.Module):
    """Tokenizer + placeholder bank + LoRA backbone + task heads."""

    def __init__(
        self,
        num_segments: int,
        text_vocab_size: int,
        n_classes: int,
        tokenizer_config: TokenizerConfig | None = None,
        backbone_config: BackboneConfig | None = None,
    ):
        super().__init__()
        tokenizer_config = tokenizer_config or TokenizerConfig()
        backbone_config = backbone_config or BackboneConfig(d_model=tokenizer_config.d_token)
        if backbone_config.d_model != tokenizer_config.d_token:
            raise ConfigError("backbone width must equal token width")
        self.tokenizer = STTokenizer(num_segments, tokenizer_config)
        self.bank = PlaceholderBank(tokenizer_config.d_token)
        self.backbone = Backbone(text_vocab_size, backbone_config)
        self.heads = TaskHeads(backbone_config.d_model, n_classes)
        self.adapters = attach_lora(self.backbone)

    def assemble(self, prompt: PromptInstance) -> torch.Tensor:
        parts = []
        if prompt.text_ids:
            ids = torch.as_tensor(prompt.text_ids, dtype=torch.long)
            parts.append(self.backbone.text_embedding(ids))
        parts.append(prompt.st_tokens)
        tsk = self.bank.stack(prompt.placeholder_kinds)
        bindings = self._placeholder_bindings(prompt)
        if bindings is not None:
            # Bind each placeholder to the ST position it queries. A frozen
            # random backbone has no position-addressing circuits a pretrained
            # one would supply, so the query token carries the queried slot's
            # positional code plus the nearest visible context token as an
            # anchor; the heads can then decode from the query's own residual
            # stream.
            txt_len = len(prompt.text_ids)
            masked = set(prompt.mask_positions)
            n_st = prompt.st_tokens.shape[0]
            anchors = []
            for b in bindings:
                anchor = b
                if b in masked:
                    for off in range(1, n_st):
                        cands = [c for c in (b - off, b + off)
                                 if 0 <= c < n_st and c not in masked]
                        if cands:
                            anchor = cands[0]
                            break
                anchors.append(anchor)
            bound = torch.as_tensor(
                [txt_len + b for b in bindings], dtype=torch.long
            )
            anchor_rows = prompt.st_tokens[
                torch.as_tensor(anchors, dtype=torch.long)
            ]
            tsk = tsk + self.backbone.pos_embedding(bound) + anchor_rows
        parts.append(tsk)
        return torch.cat(parts, dim=0)

    @staticmethod
    def _placeholder_bindings(prompt: PromptInstance) -> list[int] | None:
        """ST index each placeholder queries, or None when unbound.

        Masked tasks bind placeholders to their masked slots (pairwise for
        reconstruction's CLS/REG pairs); step-ahead tasks bind to the last
        visible unit; interval regression binds placeholder l to unit l.
        Sequence-level tasks (classification, retrieval) stay unbound.
        """
        n_tsk = len(prompt.placeholder_kinds)
        n_st = prompt.st_tokens.shape[0]
        if n_tsk == 0 or n_st == 0:
            return None
        masks = prompt.mask_positions
        if masks and n_tsk % len(masks) == 0:
            repeat = n_tsk // len(masks)
            return [m for m in masks for _ in range(repeat)]
        if prompt.task_id in ("next_hop", "one_step", "multi_step"):
            return [n_st - 1] * n_tsk
        if prompt.task_id == "tte":
            return [min(i, n_st - 1) for i in range(n_tsk)]
        return None

    def forward_prompts(self, prompts: list[PromptInstance]) -> list[BackboneOutput]:
        streams = [self.assemble(p) for p in prompts]
        lengths = [s.shape[0] for s in streams]
        L = max(lengths)
        batch = torch.stack(
            [F.pad(s, (0, 0, 0, L - s.shape[0])) for s in streams]
        )
        hidden = self.backbone(batch)
        out = []
        for i, p in enumerate(prompts):
            n_tsk = len(p.placeholder_kinds)
            n_ctx = lengths[i] - n_tsk
            out.append(BackboneOutput(Z=hidden[i, n_ctx : lengths[i]], V=hidden[i, :n_ctx]))
        return out

    def forward(self, prompts: list[PromptInstance]) -> list[BackboneOutput]:
        return self.forward_prompts(prompts)

    # -- parameter bookkeeping -------------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {"base": {}, "lora": {}, "tokenizer": {}, "heads": {}, "placeholders": {}}
        for name, p in self.named_parameters():
            if name.startswith("tokenizer."):
                groups["tokenizer"][name] = p
            elif name.startswith("bank."):
                groups["placeholders"][name] = p
            elif name.startswith("heads."):
                groups["heads"][name] = p
            elif ".adapter." in name:
                groups["lora"][name] = p
            else:
                groups["base"][name] = p
        return groups

    def trainable_parameters(self, stage: str) -> dict[str, torch.Tensor]:
        groups = self.parameter_groups()
        if stage == "mrt":
            names = ("tokenizer", "lora", "heads", "placeholders")
        elif stage == "prompt_tuning":
            names = ("lora", "heads", "placeholders")
        else:
            raise ValueError(f"unknown stage {stage!r}")
        merged = {}
        for g in names:
            merged.update(groups[g])
        return merged

    def group_hash(self, group: str) -> str:
        params = self.parameter_groups()[group]
        h = hashlib.sha256()
        for name in sorted(params):
            h.update(name.encode())
            h.update(params[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()
