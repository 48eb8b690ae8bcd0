"""ST tokenizer: static/dynamic graph attention, fusion attention, token MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import (
    DYNAMIC_DIM,
    STATIC_DIM,
    TEMPORAL_DIM,
    RoadNetwork,
    STUnitSequence,
    TrafficStateStore,
    WindowError,
)

# fixed input scaling so raw-world magnitudes do not swamp the encoders
STATIC_SCALE = torch.tensor([50.0, 5.0, 1000.0, 4.0, 5.0, 5.0, 100.0])
DYNAMIC_SCALE = torch.tensor([100.0, 10.0, 10.0])
TEMPORAL_SCALE = torch.tensor([7.0, 1440.0, 60.0])
INTERVAL_SCALE = 1800.0


@dataclass
class TokenizerConfig:
    d_hidden: int = 64
    window: int = 6          # dynamic history length T' (slices before the current one)
    gat_layers: int = 2
    gat_heads: int = 2
    d_token: int = 128

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("dynamic window must be >= 1")
        if min(self.d_hidden, self.gat_heads, self.d_token) < 1:
            raise ValueError("widths must be positive")
        if self.d_hidden % self.gat_heads:
            raise ValueError("d_hidden must be divisible by gat_heads")


class GraphAttentionLayer(nn.Module):
    """Dense multi-head graph attention over a fixed adjacency (self-loops added)."""

    def __init__(self, d_in: int, d_out: int, heads: int):
        super().__init__()
        if d_out % heads:
            raise ValueError("d_out must be divisible by heads")
        self.heads = heads
        self.d_head = d_out // heads
        self.proj = nn.Linear(d_in, d_out, bias=False)
        self.attn_src = nn.Parameter(torch.empty(heads, self.d_head))
        self.attn_dst = nn.Parameter(torch.empty(heads, self.d_head))
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.uniform_(self.attn_src, -0.1, 0.1)
        nn.init.uniform_(self.attn_dst, -0.1, 0.1)
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        # x: (..., I, d_in); adj: (I, I) binary
        h = self.proj(x)
        shape = h.shape[:-1] + (self.heads, self.d_head)
        h = h.view(shape)  # (..., I, H, dh)
        score_i = (h * self.attn_src).sum(-1)  # (..., I, H)
        score_j = (h * self.attn_dst).sum(-1)
        e = F.leaky_relu(
            score_i.unsqueeze(-2) + score_j.unsqueeze(-3), negative_slope=0.2
        )  # (..., I, I, H)
        mask = (adj + torch.eye(adj.shape[0], dtype=adj.dtype, device=adj.device)) > 0
        e = e.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        att = torch.softmax(e, dim=-2)  # normalized over neighbors j
        self.last_attention = att.detach()
        out = torch.einsum("...ijh,...jhd->...ihd", att, h)
        return out.reshape(out.shape[:-2] + (-1,))


class GraphEncoder(nn.Module):
    """Stacked GAT + FFN head, per the static/dynamic encoder layout."""

    def __init__(self, d_in: int, d_hidden: int, layers: int, heads: int):
        super().__init__()
        dims = [d_in] + [d_hidden] * layers
        self.gat_layers = nn.ModuleList(
            GraphAttentionLayer(dims[k], dims[k + 1], heads) for k in range(layers)
        )
        self.ffn = nn.Sequential(
            nn.Linear(d_hidden, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_hidden)
        )

    def forward(self, x, adj):
        for k, layer in enumerate(self.gat_layers):
            x = layer(x, adj)
            if k + 1 < len(self.gat_layers):
                x = F.elu(x)
        return self.ffn(x)

    def attention_rows(self):
        return [l.last_attention for l in self.gat_layers]


class STTokenizer(nn.Module):
    """Encodes ST-unit sequences into ST-token sequences.

    Static and dynamic GATs produce per-segment tables; a learnable-query
    cross attention fuses them per slice; an MLP folds in temporal features
    and the inter-sample interval.
    """

    def __init__(self, num_segments: int, config: TokenizerConfig | None = None):
        super().__init__()
        self.config = config or TokenizerConfig()
        c = self.config
        self.num_segments = num_segments
        self.static_encoder = GraphEncoder(STATIC_DIM, c.d_hidden, c.gat_layers, c.gat_heads)
        self.dynamic_encoder = GraphEncoder(
            (c.window + 1) * DYNAMIC_DIM, c.d_hidden, c.gat_layers, c.gat_heads
        )
        self.missing_dynamic = nn.Parameter(torch.zeros(c.d_hidden))
        # Per-segment identity embedding added to the static table. The raw
        # static features encode the segment id as one scalar, which squashes
        # fifty identities into hundredth-sized gaps; a learnable embedding
        # keeps identities linearly separable from the start.
        self.segment_embedding = nn.Parameter(torch.randn(num_segments, c.d_hidden))
        self.fusion_queries = nn.Parameter(torch.empty(num_segments, 2 * c.d_hidden))
        # Start each fusion query aligned with its own segment's identity
        # embedding so the attention begins diagonal-dominant (each segment
        # reads mostly itself) instead of averaging the whole table.
        with torch.no_grad():
            self.fusion_queries[:, : c.d_hidden] = 2.0 * self.segment_embedding
            self.fusion_queries[:, c.d_hidden :] = 0.0
        self.token_mlp = nn.Sequential(
            nn.Linear(2 * c.d_hidden + TEMPORAL_DIM + 1, c.d_token),
            nn.ReLU(),
            nn.Linear(c.d_token, c.d_token),
        )
        self.last_fusion_attention: torch.Tensor | None = None

    # -- table computation ---------------------------------------------------

    def encode_static(self, net: RoadNetwork) -> torch.Tensor:
        E = torch.as_tensor(net.static_matrix, dtype=torch.get_default_dtype())
        adj = torch.as_tensor(net.adjacency, dtype=torch.get_default_dtype())
        scale = STATIC_SCALE.to(E.dtype)
        return self.static_encoder(E / scale, adj) + self.segment_embedding

    def encode_dynamic(
        self, store: TrafficStateStore, net: RoadNetwork, slices: list[int]
    ) -> torch.Tensor:
        """(len(slices), I, d_hidden) dynamic table; window [t-T', t] per slice."""
        c = self.config
        if store.absent:
            return self.missing_dynamic.expand(len(slices), self.num_segments, c.d_hidden)
        windows = []
        for t in slices:
            w = store.window(t, c.window)  # (I, (T'+1)*D_d)
            windows.append(torch.as_tensor(w, dtype=torch.get_default_dtype()))
        x = torch.stack(windows)
        scale = DYNAMIC_SCALE.to(x.dtype).repeat(c.window + 1)
        adj = torch.as_tensor(net.adjacency, dtype=x.dtype)
        return self.dynamic_encoder(x / scale, adj)

    def fuse(self, h_static: torch.Tensor, h_dynamic: torch.Tensor) -> torch.Tensor:
        """Cross attention with one learnable query per segment.

        h_static: (I, D_h); h_dynamic: (..., I, D_h) -> fused (..., I, 2*D_h).
        """
        d_h = self.config.d_hidden
        if h_static.shape[-1] != d_h or h_dynamic.shape[-1] != d_h:
            raise ValueError("table width mismatch")
        keys = torch.cat(
            [h_static.expand_as(h_dynamic), h_dynamic], dim=-1
        )  # (..., I, 2*D_h)
        alpha = torch.matmul(self.fusion_queries, keys.transpose(-1, -2)) / math.sqrt(2 * d_h)
        att = torch.softmax(alpha, dim=-1)
        self.last_fusion_attention = att.detach()
        return torch.matmul(att, keys)

    def fused_tables(self, net: RoadNetwork, store: TrafficStateStore, slices: list[int]):
        """dict slice -> (I, 2*D_h) fused table, computed in one batch."""
        h_s = self.encode_static(net)
        h_d = self.encode_dynamic(store, net, slices)
        fused = self.fuse(h_s, h_d)
        return {t: fused[k] for k, t in enumerate(slices)}

    # -- sequence tokenization -------------------------------------------------

    def temporal_inputs(self, seq: STUnitSequence, zero_time: bool = False) -> torch.Tensor:
        dtype = torch.get_default_dtype()
        if zero_time:
            return torch.zeros(len(seq), TEMPORAL_DIM + 1, dtype=dtype)
        iota = torch.as_tensor(
            np.array([u.temporal.features for u in seq.units]), dtype=dtype
        ) / TEMPORAL_SCALE.to(dtype)
        delta = torch.as_tensor(seq.intervals, dtype=dtype).unsqueeze(-1) / INTERVAL_SCALE
        return torch.cat([iota, delta], dim=-1)

    def tokenize_sequences(
        self,
        seqs: list[STUnitSequence],
        net: RoadNetwork,
        store: TrafficStateStore,
        zero_time: bool | list[bool] = False,
    ) -> list[torch.Tensor]:
        """Each sequence -> (L, d_token) ST-token tensor."""
        if isinstance(zero_time, bool):
            zero_time = [zero_time] * len(seqs)
        needed = sorted({u.temporal.slice_index for s in seqs for u in s.units})
        tables = self.fused_tables(net, store, needed)
        out = []
        for seq, zt in zip(seqs, zero_time):
            rows = torch.stack(
                [tables[u.temporal.slice_index][seg] for u, seg in zip(seq.units, seq.segment_ids)]
            )
            out.append(self.token_mlp(torch.cat([rows, self.temporal_inputs(seq, zt)], dim=-1)))
        return out

    def attention_rows(self):
        rows = self.static_encoder.attention_rows() + self.dynamic_encoder.attention_rows()
        return [r for r in rows if r is not None]
