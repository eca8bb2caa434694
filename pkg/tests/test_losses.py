import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from discgen.losses import (
    directional_clip_loss,
    is_loss,
    itc_loss,
    reconstruct_vr,
    rsc_loss,
    total_loss,
)
from discgen.schedule import linear_beta_schedule, predict_x0

# log(1 + e^-1), 50 digits via mpmath
LOG1P_EXP_M1 = 0.31326168751822283404899549496785564191528008567035


def unit(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, d, dtype=torch.float64, generator=g)
    return x / x.norm(dim=1, keepdim=True)


def fd_check(fn, x, h=1e-6):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    numeric = torch.zeros_like(analytic)
    with torch.no_grad():
        for idx in itertools.product(*map(range, x.shape)):
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[idx] += h
            xm[idx] -= h
            numeric[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return float((analytic - numeric).abs().max() / numeric.abs().max().clamp(min=1e-12))


# ---------------------------------------------------------------- itc


def test_itc_single_pair_is_zero():
    v = unit(1, 8, 0)
    i2t, t2i, itc = itc_loss(v, unit(1, 8, 1), 0.07)
    assert float(itc) == 0.0 and float(i2t) == 0.0 and float(t2i) == 0.0


def test_itc_identity_two_by_two():
    e = torch.eye(2, dtype=torch.float64)
    i2t, t2i, itc = itc_loss(e, e, 1.0)
    assert abs(float(itc) - LOG1P_EXP_M1) <= 1e-6
    assert float(i2t) == pytest.approx(float(t2i), abs=1e-15)


def test_itc_scalar_loop_oracle():
    a, b = unit(5, 8, 2), unit(5, 8, 3)
    tau = 0.3
    s = (a @ b.T).numpy() / tau
    i2t = np.mean([-s[i, i] + math.log(sum(math.exp(s[i, j]) for j in range(5))) for i in range(5)])
    t2i = np.mean([-s[j, j] + math.log(sum(math.exp(s[i, j]) for i in range(5))) for j in range(5)])
    got = itc_loss(a, b, tau)
    assert float(got[0]) == pytest.approx(i2t, abs=1e-12)
    assert float(got[1]) == pytest.approx(t2i, abs=1e-12)
    assert float(got[2]) == pytest.approx((i2t + t2i) / 2, abs=1e-12)


def test_itc_symmetry_and_permutation():
    a, b = unit(6, 8, 4), unit(6, 8, 5)
    _, _, x = itc_loss(a, b, 0.1)
    _, _, y = itc_loss(b, a, 0.1)
    assert float(x) == pytest.approx(float(y), abs=1e-12)
    p = torch.randperm(6, generator=torch.Generator().manual_seed(0))
    _, _, z = itc_loss(a[p], b[p], 0.1)
    assert float(x) == pytest.approx(float(z), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 10_000), tau=st.floats(0.01, 2.0))
def test_itc_positive_for_n_at_least_two(n, seed, tau):
    _, _, itc = itc_loss(unit(n, 4, seed), unit(n, 4, seed + 1), tau)
    assert float(itc) > 0


def test_itc_rejects_bad_inputs():
    v = unit(3, 4, 0)
    with pytest.raises(ValueError):
        itc_loss(v, v, 0.0)
    with pytest.raises(ValueError):
        itc_loss(v * 2, v, 0.1)
    with pytest.raises(ValueError):
        itc_loss(v, v[:2], 0.1)


def test_itc_gradient_finite_differences():
    b = unit(3, 8, 7)
    raw = torch.randn(3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(8))

    def f(x):
        return itc_loss(x / x.norm(dim=1, keepdim=True), b, 0.2)[2]

    assert fd_check(f, raw) <= 1e-4


# ---------------------------------------------------------------- is


def test_is_loss_cases():
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    assert float(is_loss(x, x)) == 0.0
    assert float(is_loss(torch.zeros(2, 3), torch.ones(2, 3))) == 1.0
    with pytest.raises(ValueError):
        is_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_is_loss_scalar_loop():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(2, 2, 4, 4, dtype=torch.float64, generator=g)
    b = torch.randn(2, 2, 4, 4, dtype=torch.float64, generator=g)
    acc = 0.0
    for v, w in zip(a.flatten().tolist(), b.flatten().tolist()):
        acc += (v - w) ** 2
    assert float(is_loss(a, b)) == pytest.approx(acc / a.numel(), abs=1e-14)


# ---------------------------------------------------------------- rsc


def test_rsc_parallel_antiparallel_orthogonal():
    r = torch.zeros(1, 2, 4, dtype=torch.float64)
    v = torch.tensor([[[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 5.0, 2.0]]], dtype=torch.float64)
    assert float(rsc_loss(3 * v, v, r)) == 0.0
    assert float(rsc_loss(-v, v, r)) == 2.0
    e1 = torch.tensor([[[1.0, 0, 0, 0]]], dtype=torch.float64)
    e2 = torch.tensor([[[0, 1.0, 0, 0]]], dtype=torch.float64)
    assert float(rsc_loss(e1, e2, torch.zeros_like(e1))) == 1.0


def test_rsc_scalar_loop_oracle():
    g = torch.Generator().manual_seed(1)
    f, l, r = (torch.randn(3, 2, 8, dtype=torch.float64, generator=g) for _ in range(3))
    cosines = []
    for i in range(3):
        for j in range(2):
            a = (f[i, j] - r[i, j]).tolist()
            b = (l[i, j] - r[i, j]).tolist()
            dot = sum(x * y for x, y in zip(a, b))
            cosines.append(dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))))
    assert float(rsc_loss(f, l, r)) == pytest.approx(1 - sum(cosines) / len(cosines), abs=1e-12)


def test_rsc_bounds_random():
    g = torch.Generator().manual_seed(2)
    for _ in range(1000):
        f, l, r = (torch.randn(2, 2, 8, dtype=torch.float64, generator=g) for _ in range(3))
        v = float(rsc_loss(f, l, r))
        assert 0.0 <= v <= 2.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(1e-3, 1e3))
def test_rsc_invariant_to_positive_scaling(seed, k):
    g = torch.Generator().manual_seed(seed)
    f, l = (torch.randn(2, 2, 8, dtype=torch.float64, generator=g) for _ in range(2))
    r = torch.zeros_like(f)
    assert float(rsc_loss(k * f, l, r)) == pytest.approx(float(rsc_loss(f, l, r)), abs=1e-12)


def test_rsc_degenerate_rows():
    r = torch.zeros(1, 2, 3, dtype=torch.float64)
    f = torch.tensor([[[1.0, 0, 0], [0, 0, 0]]], dtype=torch.float64)
    l = torch.tensor([[[2.0, 0, 0], [1.0, 1.0, 0]]], dtype=torch.float64)
    loss, excluded = rsc_loss(f, l, r, return_excluded=True)
    assert excluded == 1 and float(loss) == 0.0
    with pytest.raises(ValueError):
        rsc_loss(r, l, r)
    with pytest.raises(ValueError):
        rsc_loss(f, l[:, :1], r)


def test_rsc_gradient_finite_differences():
    g = torch.Generator().manual_seed(3)
    f, l, r = (torch.randn(3, 2, 8, dtype=torch.float64, generator=g) for _ in range(3))
    assert fd_check(lambda x: rsc_loss(x, l, r), f) <= 1e-4
    assert fd_check(lambda x: rsc_loss(f, l, x), r) <= 1e-4


# ---------------------------------------------------------------- misc


def test_directional_clip_loss():
    assert float(directional_clip_loss([2.0, 0], [1.0, 0], [3.0, 1], [1.0, 1])) == 0.0
    assert float(directional_clip_loss([0.0, 1], [0.0, 0], [1.0, 0], [0.0, 0])) == 1.0
    with pytest.raises(ValueError):
        directional_clip_loss([1.0, 1], [1.0, 1], [1.0, 0], [0.0, 0])


def test_reconstruct_vr_is_predict_x0():
    sched = linear_beta_schedule()
    g = torch.Generator().manual_seed(0)
    z, e = (torch.randn(3, 4, 8, 8, dtype=torch.float64, generator=g) for _ in range(2))
    t = torch.tensor([0, 500, 999])
    assert torch.equal(reconstruct_vr(z, t, e, sched), predict_x0(z, t, e, sched))


def test_total_loss_weights():
    a, b, c = (torch.tensor(v, dtype=torch.float64) for v in (0.5, 2.0, 0.25))
    tot, rep = total_loss(a, b, c, (1, 1, 1))
    assert float(tot) == 2.75 and rep.total == 2.75
    assert float(total_loss(a, b, c, (1, 0, 0))[0]) == 0.5
    assert float(total_loss(a, b, c, (0, 0, 0))[0]) == 0.0
    assert rep.to_dict()["is"] == 2.0
    with pytest.raises(ValueError):
        total_loss(a, b, c, (1, -1, 1))
