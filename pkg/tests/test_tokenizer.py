import math

import numpy as np
import pytest
import torch

from stfoundry import data as D
from stfoundry.tokenizer import (
    DYNAMIC_SCALE,
    GraphAttentionLayer,
    STATIC_SCALE,
    STTokenizer,
    TokenizerConfig,
)


def test_config_validation():
    with pytest.raises(ValueError):
        TokenizerConfig(window=0)
    with pytest.raises(ValueError):
        TokenizerConfig(d_hidden=15, gat_heads=2)
    with pytest.raises(ValueError):
        TokenizerConfig(d_token=0)
    assert TokenizerConfig().d_hidden == 64
    assert TokenizerConfig().window == 6
    assert TokenizerConfig().d_token == 128


def _hand_gat(layer: GraphAttentionLayer, x: torch.Tensor, adj: torch.Tensor):
    """Independent per-node message-passing evaluation of one GAT layer."""
    with torch.no_grad():
        I = x.shape[0]
        h = (x @ layer.proj.weight.T).view(I, layer.heads, layer.d_head)
        allowed = (adj + torch.eye(I)) > 0
        out = torch.zeros(I, layer.heads, layer.d_head)
        for i in range(I):
            for hd in range(layer.heads):
                scores = []
                nbrs = [j for j in range(I) if allowed[i, j]]
                for j in nbrs:
                    e = float(h[i, hd] @ layer.attn_src[hd] + h[j, hd] @ layer.attn_dst[hd])
                    scores.append(e if e > 0 else 0.2 * e)
                scores = np.array(scores)
                w = np.exp(scores - scores.max())
                w = w / w.sum()
                for wj, j in zip(w, nbrs):
                    out[i, hd] += float(wj) * h[j, hd]
        return out.reshape(I, -1)


def test_gat_oracle():
    torch.manual_seed(0)
    layer = GraphAttentionLayer(5, 8, heads=2)
    adj = torch.tensor(
        [[0, 1, 0, 0], [0, 0, 1, 1], [1, 0, 0, 0], [0, 0, 0, 0]], dtype=torch.float32
    )
    x = torch.randn(4, 5)
    got = layer(x, adj)
    want = _hand_gat(layer, x, adj)
    assert torch.allclose(got, want, atol=1e-5)


def test_gat_attention_rows_normalized():
    torch.manual_seed(1)
    layer = GraphAttentionLayer(4, 6, heads=3)
    adj = (torch.rand(7, 7) < 0.4).float()
    layer(torch.randn(7, 4), adj)
    att = layer.last_attention  # (I, I, H)
    assert (att >= 0).all()
    sums = att.sum(dim=-2)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
    # attention only on allowed edges
    allowed = (adj + torch.eye(7)) > 0
    assert (att[~allowed] == 0).all()


def test_fusion_oracle(tiny_world, small_tok_cfg):
    torch.manual_seed(2)
    tok = STTokenizer(tiny_world.network.num_segments, small_tok_cfg)
    with torch.no_grad():
        h_s = tok.encode_static(tiny_world.network)
        h_d = tok.encode_dynamic(tiny_world.store, tiny_world.network, [6, 7])
        fused = tok.fuse(h_s, h_d)
        keys = torch.cat([h_s.expand_as(h_d), h_d], dim=-1)
        alpha = tok.fusion_queries @ keys.transpose(-1, -2) / math.sqrt(2 * small_tok_cfg.d_hidden)
        att = torch.softmax(alpha, dim=-1)
        want = att @ keys
    assert torch.allclose(fused, want, atol=1e-6)
    rows = tok.last_fusion_attention.sum(dim=-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)
    assert (tok.last_fusion_attention >= 0).all()


def test_fuse_width_mismatch(small_tok_cfg):
    tok = STTokenizer(4, small_tok_cfg)
    with pytest.raises(ValueError):
        tok.fuse(torch.zeros(4, 8), torch.zeros(2, 4, 16))


def test_static_table_independent_of_store(tiny_world, small_tok_cfg):
    torch.manual_seed(3)
    tok = STTokenizer(tiny_world.network.num_segments, small_tok_cfg)
    with torch.no_grad():
        a = tok.encode_static(tiny_world.network)
        b = tok.encode_static(tiny_world.network)
    assert (a == b).all()
    assert a.shape == (tiny_world.network.num_segments, small_tok_cfg.d_hidden)


def test_shared_unit_token_identical(tiny_world, small_tok_cfg):
    """Same (segment, slice, temporal, interval) -> bitwise same token row."""
    torch.manual_seed(4)
    tok = STTokenizer(tiny_world.network.num_segments, small_tok_cfg)
    net, store = tiny_world.network, tiny_world.store
    ts = 6 * 1800 + 60
    seq_a = D.trajectory_sequence(net, store, [(0, ts - 60), (1, ts)])
    seq_b = D.trajectory_sequence(net, store, [(2, ts - 60), (1, ts)])
    with torch.no_grad():
        toks = tok.tokenize_sequences([seq_a, seq_b], net, store)
    assert (toks[0][1] == toks[1][1]).all()
    assert toks[0].shape == (2, small_tok_cfg.d_token)


def test_zero_time_channels(tiny_world, small_tok_cfg):
    tok = STTokenizer(tiny_world.network.num_segments, small_tok_cfg)
    net, store = tiny_world.network, tiny_world.store
    seq = D.trajectory_sequence(net, store, [(0, 11000), (1, 11100)])
    z = tok.temporal_inputs(seq, zero_time=True)
    assert (z == 0).all()
    n = tok.temporal_inputs(seq, zero_time=False)
    assert not (n == 0).all()
    assert n[1, -1] == pytest.approx(100 / 1800)


def test_temporal_scaling(tiny_world, small_tok_cfg):
    tok = STTokenizer(tiny_world.network.num_segments, small_tok_cfg)
    seq = D.trajectory_sequence(
        tiny_world.network, tiny_world.store, [(0, 86400 + 3600 + 30)]
    )
    row = tok.temporal_inputs(seq)[0]
    assert row[0] == pytest.approx(1 / 7)       # day of week
    assert row[1] == pytest.approx(60 / 1440)   # minute of day
    assert row[2] == pytest.approx(30 / 60)     # second
    assert row[3] == 0                          # first interval


def test_absent_store_uses_learned_vector(small_tok_cfg):
    cfg = D.WorldConfig(num_segments=6, num_trajectories=5, num_users=2,
                        dynamics_absent=True, seed=2)
    w = D.generate_synthetic_world(cfg)
    tok = STTokenizer(6, small_tok_cfg)
    with torch.no_grad():
        h_d = tok.encode_dynamic(w.store, w.network, [3, 4])
    assert h_d.shape == (2, 6, small_tok_cfg.d_hidden)
    assert (h_d[0, 0] == tok.missing_dynamic).all()
    # tokenization end to end still works
    toks = tok.tokenize_sequences([w.trajectories[0]], w.network, w.store)
    assert toks[0].shape[1] == small_tok_cfg.d_token


def test_dynamic_window_content(tiny_world, small_tok_cfg):
    """The dynamic encoder input for slice t is the scaled window [t-T', t]."""
    tok = STTokenizer(tiny_world.network.num_segments, small_tok_cfg)
    store, net = tiny_world.store, tiny_world.network
    t = 8
    w = store.window(t, small_tok_cfg.window)
    assert w.shape == (net.num_segments, (small_tok_cfg.window + 1) * D.DYNAMIC_DIM)
    with torch.no_grad():
        h = tok.encode_dynamic(store, net, [t])
    assert h.shape == (1, net.num_segments, small_tok_cfg.d_hidden)


def test_scaling_constants_shapes():
    assert STATIC_SCALE.shape == (D.STATIC_DIM,)
    assert DYNAMIC_SCALE.shape == (D.DYNAMIC_DIM,)
