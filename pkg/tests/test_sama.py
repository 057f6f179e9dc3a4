import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptfuse.objectives import AttentionMapSet
from conceptfuse.sama import (
    aggregate_values, compose_values, concept_mask, cost_volume, minmax_normalize, sama_attention, semantic_flow,
    warp_values,
)
from conceptfuse.testbed.model import AttnMeta, attention


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ---- brute-force oracles ------------------------------------------------------------------

def loop_cost(pt, pr, m, eps=1e-8):
    n = len(pt)
    out = np.zeros((n, n))
    for x in range(n):
        t = [pt[x][c] * m[x] for c in range(len(pt[x]))]
        nt = math.sqrt(sum(v * v for v in t))
        for y in range(n):
            nr = math.sqrt(sum(v * v for v in pr[y]))
            if nt < eps or nr < eps:
                continue
            out[x, y] = min(1.0, max(-1.0, sum(a * b for a, b in zip(t, pr[y])) / (nt * nr)))
    return out


def loop_argmax(c):
    flow = []
    for row in c:
        best, arg = -np.inf, 0
        for j, v in enumerate(row):
            if v > best:
                best, arg = v, j
        flow.append(arg)
    return flow


def loop_warp(v, flow, m):
    return np.array([[v[flow[x]][c] * m[x] for c in range(v.shape[1])] for x in range(len(flow))])


def loop_aggregate(warped, vt, masks):
    out = np.zeros_like(vt)
    for x in range(vt.shape[0]):
        cov = min(1.0, max(0.0, sum(m[x] for m in masks)))
        for c in range(vt.shape[1]):
            out[x, c] = sum(w[x, c] for w in warped) + vt[x, c] * (1 - cov)
    return out


# ---- masks ------------------------------------------------------------------------------

def test_minmax_examples():
    assert torch.equal(minmax_normalize(torch.full((4, 4), 0.3)), torch.zeros(4, 4))
    peak = torch.zeros(4, 4)
    peak[1, 2] = 5
    out = minmax_normalize(peak)
    assert out[1, 2] == 1 and out.sum() == 1
    m = rand(4, 4, seed=1)
    ref = (m.numpy() - m.numpy().min()) / (m.numpy().max() - m.numpy().min())
    np.testing.assert_allclose(minmax_normalize(m).numpy(), ref, rtol=1e-12)


def test_concept_mask_from_maps():
    s = AttentionMapSet()
    probs = torch.softmax(rand(1, 256, 6, seed=2), -1)
    s.hook(AttnMeta("up16.attn2", 16, True, True), probs)
    mask = concept_mask(s, (2, 3), 16)
    assert mask.shape == (1, 16, 16)
    assert float(mask.min()) == 0 and float(mask.max()) == 1
    with pytest.raises(ValueError, match="not present"):
        concept_mask(s, (), 16)


# ---- cost volume / flow / warp / aggregate ----------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 16), st.integers(1, 6))
def test_cost_volume_matches_loops(seed, n, c):
    pt, pr = rand(n, c, seed=seed), rand(n, c, seed=seed + 1)
    m = rand(n, seed=seed + 2).abs()
    m[0] = 0
    got = cost_volume(pt, pr, m)
    np.testing.assert_allclose(got.numpy(), loop_cost(pt.tolist(), pr.tolist(), m.tolist()), atol=1e-6)
    assert float(got.abs().max()) <= 1.0
    assert torch.all(got[0] == 0)


def test_cost_volume_examples():
    q, _ = torch.linalg.qr(rand(4, 4, seed=3))
    c = cost_volume(q, q, torch.ones(4, dtype=torch.float64))
    assert torch.allclose(torch.diagonal(c), torch.ones(4, dtype=torch.float64))
    assert torch.equal(semantic_flow(c), torch.arange(4))
    b = torch.zeros(4, 4, dtype=torch.float64)
    b[:, 2] = 1
    assert torch.equal(cost_volume(torch.eye(4, dtype=torch.float64)[:2].repeat(2, 1),
                                   b, torch.ones(4, dtype=torch.float64)), torch.zeros(4, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        cost_volume(rand(4, 3), rand(5, 3), torch.ones(4))
    with pytest.raises(ValueError):
        cost_volume(rand(4, 3), rand(4, 3), torch.ones(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 16))
def test_flow_matches_linear_scan(seed, n):
    c = torch.round(rand(n, n, seed=seed) * 2) / 2  # coarse values force ties
    assert semantic_flow(c).tolist() == loop_argmax(c.numpy())


def test_zero_row_flows_to_first_index():
    assert semantic_flow(torch.zeros(3, 5)).tolist() == [0, 0, 0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 16), st.integers(1, 5))
def test_warp_matches_gather(seed, n, c):
    v = rand(n, c, seed=seed)
    flow = torch.randint(0, n, (n,), generator=torch.Generator().manual_seed(seed))
    m = rand(n, seed=seed + 1).abs()
    np.testing.assert_allclose(warp_values(v, flow, m).numpy(), loop_warp(v.numpy(), flow.tolist(), m.numpy()),
                               atol=1e-12)


def test_warp_examples():
    v = rand(6, 3)
    assert torch.equal(warp_values(v, torch.arange(6), torch.ones(6, dtype=v.dtype)), v)
    assert torch.equal(warp_values(v, torch.arange(6), torch.zeros(6, dtype=v.dtype)), torch.zeros_like(v))
    m = rand(6, seed=1).abs()
    out = warp_values(v, torch.full((6,), 4), m)
    assert torch.allclose(out, v[4][None] * m[:, None])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 16), st.integers(0, 3))
def test_aggregate_matches_loops(seed, n, k):
    vt = rand(n, 4, seed=seed)
    warped = [rand(n, 4, seed=seed + 1 + i) for i in range(k)]
    masks = [rand(n, seed=seed + 10 + i).abs().clamp(max=1) for i in range(k)]
    got = aggregate_values(warped, vt, masks)
    np.testing.assert_allclose(got.numpy(), loop_aggregate([w.numpy() for w in warped], vt.numpy(),
                                                           [m.numpy() for m in masks]), atol=1e-12)


def test_aggregate_disjoint_piecewise():
    vt, w1, w2 = rand(8, 3, seed=1), rand(8, 3, seed=2), rand(8, 3, seed=3)
    m1 = torch.tensor([1, 1, 0, 0, 0, 0, 0, 0], dtype=torch.float64)
    m2 = torch.tensor([0, 0, 0, 1, 1, 0, 0, 0], dtype=torch.float64)
    out = aggregate_values([w1 * m1[:, None], w2 * m2[:, None]], vt, [m1, m2])
    for x in range(8):
        expected = w1[x] if m1[x] else w2[x] if m2[x] else vt[x]
        assert torch.equal(out[x], expected)
    assert torch.equal(aggregate_values([], vt, []), vt)
    assert torch.equal(aggregate_values([torch.zeros_like(vt)], vt, [torch.zeros(8, dtype=vt.dtype)]), vt)


# ---- attention ----------------------------------------------------------------------------

def test_sama_attention_oracle_and_identity():
    q, k, v = rand(3, 3, seed=1), rand(3, 3, seed=2), rand(3, 3, seed=3)
    qn, kn, vn = q.numpy(), k.numpy(), v.numpy()
    logits = qn @ kn.T / math.sqrt(3)
    w = np.exp(logits - logits.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    np.testing.assert_allclose(sama_attention(q, k, v).numpy(), w @ vn, atol=1e-6)
    np.testing.assert_allclose(w.sum(1), 1, atol=1e-6)
    assert torch.equal(sama_attention(q[:1], k[:1], v[:1]), v[:1])
    ref, _ = attention(q[None], k[None], v[None], 1)
    assert torch.equal(sama_attention(q, k, v), ref[0])
    with pytest.raises(ValueError):
        sama_attention(q, k[:2], v)


def test_compose_zero_masks_is_identity_and_self_match():
    vt = rand(16, 4, seed=1)
    pt = rand(16, 5, seed=2)
    refs = [(rand(16, 5, seed=3), rand(16, 4, seed=4)), (rand(16, 5, seed=5), rand(16, 4, seed=6))]
    out = compose_values(vt, pt, refs, [torch.zeros(16, dtype=vt.dtype)] * 2)
    assert torch.equal(out.v_w, vt)
    q, _ = torch.linalg.qr(rand(16, 16, seed=7))
    vr = rand(16, 4, seed=8)
    out = compose_values(vt, q, [(q, vr)], [torch.ones(16, dtype=vt.dtype)])
    assert torch.equal(out.v_w, vr)
    assert torch.equal(out.matches[0].flow, torch.arange(16))
