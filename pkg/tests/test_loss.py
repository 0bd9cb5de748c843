import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from mbgr import diffcore as dc
from mbgr.ldr import MASK, route_batch
from mbgr.loss import (EMPIRICAL_WEIGHTS, LossConfig, PairBatch, infonce, infonce_pairs, inverse_frequency_weights,
                       level_logits, normalize_business_weights, time_decay, total_loss)

D = torch.float64
DAY = 86400.0


def test_time_decay_examples():
    assert time_decay(5.0, 5.0, 0.7) == 1.0
    assert abs(time_decay(20 * DAY, 0.0, 0.05) - math.exp(-1)) < 1e-12
    assert time_decay(100 * DAY, 0.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        time_decay(0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        time_decay(torch.tensor([0.0]), torch.tensor([1.0]), 0.1)


@given(st.floats(1e-3, 5), st.floats(0, 50), st.floats(1e-3, 50))
def test_time_decay_strictly_decreasing(alpha, d1, gap):
    # alpha * delta stays below 500 so exp does not underflow to zero
    assert time_decay(d1 + gap, 0.0, alpha, unit=1.0) < time_decay(d1, 0.0, alpha, unit=1.0)


def test_weight_normalization():
    given = {"A": 0.9, "B": 1.5, "C": 1.3, "D": 1.0}
    assert normalize_business_weights(given, "as-given") == given
    scaled = normalize_business_weights(given, "sum-to-B")
    expect = {"A": 0.76596, "B": 1.27660, "C": 1.10638, "D": 0.85106}
    assert all(abs(scaled[k] - expect[k]) < 5e-6 for k in given)
    assert sum(scaled.values()) == pytest.approx(4.0)
    for mode in ("as-given", "sum-to-B"):
        assert normalize_business_weights([1.0] * 4, mode) == [1.0] * 4
    with pytest.raises(ValueError):
        normalize_business_weights([1.0, 0.0])
    with pytest.raises(ValueError):
        LossConfig(business_weights=[1.0, -2.0])
    assert list(EMPIRICAL_WEIGHTS) == [0.9, 1.5, 1.3, 1.0]


def test_inverse_frequency_weights():
    w = inverse_frequency_weights([0.5, 0.25, 0.25])
    assert w == pytest.approx([0.6, 1.2, 1.2])


def test_uniform_logits_give_log_v():
    for V in (2, 5, 17):
        tables = torch.ones(1, V, 3, dtype=D)
        pairs = PairBatch(torch.ones(1, 1, 3, dtype=D), torch.tensor([[V - 1]]), torch.tensor([0]),
                          torch.ones(1, dtype=D))
        comps, counts = infonce_pairs(pairs, tables, LossConfig(tau=1.0), 1)
        assert counts == [1]
        assert abs(comps[0].item() - math.log(V)) < 1e-9


def test_zero_norm_raises():
    with pytest.raises(ZeroDivisionError):
        level_logits(torch.zeros(1, 1, 2, dtype=D), torch.ones(1, 3, 2, dtype=D), 1.0)
    with pytest.raises(ZeroDivisionError):
        level_logits(torch.ones(1, 1, 2, dtype=D), torch.zeros(1, 3, 2, dtype=D), 1.0)


def _toy(seed=0, U=2, L=5, B=3, K=2, V=4, d=3):
    gen = torch.Generator().manual_seed(seed)
    bus = torch.randint(0, B, (U, L), generator=gen)
    valid = torch.ones(U, L, dtype=torch.bool)
    valid[1, :2] = False
    targets = torch.from_numpy(route_batch(bus.numpy(), valid.numpy(), B))
    sids = torch.randint(0, V, (U, L, K), generator=gen)
    ts = torch.cumsum(torch.rand(U, L, generator=gen, dtype=D) * 3 * DAY, dim=1)
    pred = torch.randn(U, L, B, K, d, generator=gen, dtype=D)
    tables = torch.randn(K, V, d, generator=gen, dtype=D)
    return pred, targets, sids, ts, ts[:, -1], tables


def brute_infonce(pred, targets, sids, ts, t_last, tables, cfg):
    U, L, B = targets.shape
    K, V, _ = tables.shape
    w_b = cfg.weights(B)
    sums, counts = [0.0] * B, [0] * B
    for u in range(U):
        for l in range(L):
            for b in range(B):
                tgt = int(targets[u, l, b])
                if tgt == MASK:
                    continue
                w_t = math.exp(-cfg.alpha * (float(t_last[u]) - float(ts[u, tgt])) / cfg.time_unit)
                loss = 0.0
                for k in range(K):
                    p = pred[u, l, b, k].tolist()
                    logits = []
                    for v in range(V):
                        e = tables[k, v].tolist()
                        cos = sum(x * y for x, y in zip(p, e)) / (math.hypot(*p) * math.hypot(*e))
                        logits.append(cos / cfg.tau)
                    true = logits[int(sids[u, tgt, k])]
                    loss += -(true - math.log(sum(math.exp(z) for z in logits)))
                sums[b] += w_t * loss
                counts[b] += 1
    return [w_b[b] * sums[b] / counts[b] if counts[b] else 0.0 for b in range(B)], counts


def test_matches_brute_force():
    for seed in range(3):
        cfg = LossConfig(tau=0.5, alpha=0.1, business_weights=[0.9, 1.5, 1.3])
        args = _toy(seed)
        comps, counts = infonce(*args, cfg)
        ref, ref_counts = brute_infonce(*args, cfg)
        assert counts == ref_counts
        assert [c.item() for c in comps] == pytest.approx(ref, rel=1e-12)


def test_two_pairs_tau_one_by_hand():
    tables = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=D)
    pred = torch.tensor([[[1.0, 0.0]], [[1.0, 1.0]]], dtype=D)
    pairs = PairBatch(pred, torch.tensor([[0], [1]]), torch.tensor([0, 0]), torch.tensor([1.0, 0.5], dtype=D))
    comps, _ = infonce_pairs(pairs, tables, LossConfig(tau=1.0), 1)
    c = 1 / math.sqrt(2)
    first = -(1 - math.log(math.e + 1))
    second = -(c - math.log(2 * math.exp(c)))
    assert comps[0].item() == pytest.approx((first + 0.5 * second) / 2, rel=1e-14)


def test_mask_entries_are_never_read():
    cfg = LossConfig(tau=0.3)
    pred, targets, sids, ts, t_last, tables = _toy(1)
    base = total_loss(*infonce(pred, targets, sids, ts, t_last, tables, cfg)[:1], torch.tensor(0.7, dtype=D), cfg)
    noisy = pred.clone()
    noisy[targets == MASK] = torch.randn_like(noisy[targets == MASK]) * 100
    again = total_loss(*infonce(noisy, targets, sids, ts, t_last, tables, cfg)[:1], torch.tensor(0.7, dtype=D), cfg)
    assert torch.equal(base.total, again.total)
    p = pred.clone().requires_grad_(True)
    comps, _ = infonce(p, targets, sids, ts, t_last, tables, cfg)
    sum(comps).backward()
    assert torch.all(p.grad[targets == MASK] == 0)


def test_business_weight_linearity():
    args = _toy(2)
    base, _ = infonce(*args, LossConfig(business_weights=[1.0, 1.0, 1.0]))
    twice, _ = infonce(*args, LossConfig(business_weights=[1.0, 2.0, 1.0]))
    assert twice[1].item() == 2 * base[1].item()
    assert twice[0].item() == base[0].item() and twice[2].item() == base[2].item()


def test_total_loss_identities():
    args = _toy(3)
    recon = torch.tensor(1.25, dtype=D)
    cfg0 = LossConfig(lam=0.0)
    comps, counts = infonce(*args, cfg0)
    out = total_loss(comps, recon, cfg0, counts)
    assert torch.equal(out.total, comps[0] + comps[1] + comps[2])
    cfg = LossConfig(lam=0.3)
    comps, counts = infonce(*args, cfg)
    out = total_loss(comps, recon, cfg, counts)
    assert out.total.item() == pytest.approx(sum(c.item() for c in comps) + 0.3 * 1.25, rel=1e-14)
    assert out.counts == counts
    # everything masked: only reconstruction remains
    pred, targets, sids, ts, t_last, tables = args
    masked = torch.full_like(targets, MASK)
    comps, counts = infonce(pred, masked, sids, ts, t_last, tables, cfg)
    assert counts == [0, 0, 0]
    assert total_loss(comps, recon, cfg, counts).total.item() == pytest.approx(0.3 * 1.25, rel=1e-15)


def test_reduces_to_plain_cross_entropy():
    gen = torch.Generator().manual_seed(5)
    P, K, V, d = 7, 3, 6, 4
    pred = torch.randn(P, K, d, generator=gen, dtype=D)
    tables = torch.randn(K, V, d, generator=gen, dtype=D)
    tokens = torch.randint(0, V, (P, K), generator=gen)
    cfg = LossConfig(tau=0.2, lam=0.0, alpha=0.0)
    pairs = PairBatch(pred, tokens, torch.zeros(P, dtype=torch.long), torch.ones(P, dtype=D))
    comps, _ = infonce_pairs(pairs, tables, cfg, 1)
    total = total_loss(comps, torch.tensor(3.0, dtype=D), cfg).total
    logits = torch.stack([F.normalize(pred[:, k], dim=-1) @ F.normalize(tables[k], dim=-1).T
                          for k in range(K)], 1) / 0.2
    ref = sum(F.cross_entropy(logits[:, k], tokens[:, k]) for k in range(K))
    assert abs(total.item() - ref.item()) < 1e-9


def test_loss_gradients():
    pred, targets, sids, ts, t_last, tables = _toy(4)
    pred.requires_grad_(True)
    tables.requires_grad_(True)
    cfg = LossConfig(tau=0.5, alpha=0.2, business_weights=[0.9, 1.5, 1.3], lam=0.1)
    recon_src = torch.randn(3, dtype=D, requires_grad=True)

    def loss():
        comps, counts = infonce(pred, targets, sids, ts, t_last, tables, cfg)
        return total_loss(comps, (recon_src ** 2).sum(), cfg, counts).total

    rep = dc.grad_check(loss, {"pred": pred, "tables": tables, "recon": recon_src}, eps=1e-6, tolerance=1e-4)
    assert rep.passed, rep.worst()


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)
    with pytest.raises(ValueError):
        LossConfig(weight_mode="softmax")
    with pytest.raises(ValueError):
        LossConfig(business_weights=[1.0, 2.0]).weights(3)
    assert LossConfig(business_weights=[1.0, 3.0], weight_mode="sum-to-B").weights(2) == [0.5, 1.5]
