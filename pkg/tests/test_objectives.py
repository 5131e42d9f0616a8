import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from decompfuse.errors import ConfigurationError, ContractError, NumericError
from decompfuse.mfm import sample_tokens
from decompfuse.model import FusionNetwork
from decompfuse.objectives import (
    ALPHA,
    MCUD_KEYS,
    S_CUD_KEYS,
    LossReport,
    Regime,
    check_finite,
    loss_m_com,
    loss_m_uni,
    loss_mfm,
    loss_s_cud,
    loss_total,
)
from conftest import micro_model_config
from oracles import sampled_gradient_check

seeds = st.integers(0, 2**31 - 1)


def rand(shape, seed, dtype=torch.float64):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def loop_l1(a, b):
    a, b = a.numpy().ravel(), b.numpy().ravel()
    return sum(abs(float(p) - float(q)) for p, q in zip(a, b)) / a.size


def loop_mse(a, b):
    a, b = a.numpy().ravel(), b.numpy().ravel()
    return sum((float(p) - float(q)) ** 2 for p, q in zip(a, b)) / a.size


def test_s_cud_perfect_fit_is_zero():
    t = [rand((1, 3, 4, 4), s) for s in range(4)]
    comps = loss_s_cud(*t, *t)
    assert all(float(v) == 0 for v in comps.values())
    assert set(comps) == set(S_CUD_KEYS)


def test_s_cud_constant_offset():
    t = [rand((1, 3, 4, 4), s) for s in range(4)]
    comps = loss_s_cud(*(x + 0.1 for x in t), *t)
    for v in comps.values():
        assert abs(float(v) - 0.1) < 1e-12


@given(seeds)
def test_s_cud_matches_loop(seed):
    preds = [rand((1, 3, 4, 4), seed + i) for i in range(4)]
    targets = [rand((1, 3, 4, 4), seed + 10 + i) for i in range(4)]
    comps = loss_s_cud(*preds, *targets)
    for key, p, t in zip(S_CUD_KEYS, preds, targets):
        assert abs(float(comps[key]) - loop_l1(p, t)) < 1e-7


def test_s_cud_shape_mismatch():
    a = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ContractError):
        loss_s_cud(a, a, a, torch.zeros(1, 3, 4, 5), a, a, a, a)


def test_m_com_zero_and_single_entry():
    c = rand((9, 8), 0)
    assert float(loss_m_com(c, c.clone())) == 0
    bumped = c.clone()
    bumped[3, 5] += 0.3
    assert abs(float(loss_m_com(c, bumped)) - 0.3**2 / c.numel()) < 1e-12


@given(seeds)
def test_m_com_matches_loop(seed):
    a, b = rand((6, 8), seed), rand((6, 8), seed + 1)
    assert abs(float(loss_m_com(a, b)) - loop_mse(a, b)) < 1e-7
    assert abs(float(loss_m_com(a, b, norm="l1")) - loop_l1(a, b)) < 1e-7


def test_unknown_norm():
    with pytest.raises(ConfigurationError):
        loss_m_com(rand((2, 2), 0), rand((2, 2), 1), norm="l3")


def test_m_uni_zero_and_dim_check():
    lat = [rand((5, 12), s) for s in range(2)]
    assert float(loss_m_uni(lat[0], lat[1], lat[0].clone(), lat[1].clone())) == 0
    with pytest.raises(ConfigurationError):
        loss_m_uni(lat[0], lat[1], rand((5, 16), 3), lat[1])


@given(seeds)
def test_m_uni_matches_loop(seed):
    t = [rand((5, 12), seed + i) for i in range(4)]
    want = loop_mse(t[0], t[2]) + loop_mse(t[1], t[3])
    assert abs(float(loss_m_uni(*t)) - want) < 1e-7


def test_m_uni_never_updates_reference_producer():
    ref_w = torch.nn.Parameter(torch.randn(4, 4, dtype=torch.float64))
    lat = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    src = torch.randn(3, 4, dtype=torch.float64)
    loss_m_uni(lat, lat, src @ ref_w, src @ ref_w).backward()
    assert ref_w.grad is None and lat.grad.abs().sum() > 0


def test_mfm_examples():
    x = rand((1, 3, 4, 4), 0)
    assert float(loss_mfm(x, x)) == 0
    binary = (x > 0.5).double()
    assert float(loss_mfm(1 - binary, binary)) == 1.0


@given(seeds)
def test_mfm_matches_loop(seed):
    a, b = rand((1, 3, 4, 4), seed), rand((1, 3, 4, 4), seed + 1)
    assert abs(float(loss_mfm(a, b)) - loop_l1(a, b)) < 1e-7


def test_total_single_modal_example():
    comps = {k: torch.tensor(0.25) for k in S_CUD_KEYS}
    comps["mfm"] = torch.tensor(2.0)
    rep = loss_total("single_modal", comps, alpha=0.1)
    assert abs(float(rep.total) - 1.2) < 1e-6
    assert ALPHA == 0.1


def test_total_multi_modal_zero():
    rep = loss_total(Regime.MULTI_MODAL, {k: torch.tensor(0.0) for k in MCUD_KEYS})
    assert float(rep.total) == 0 and rep.regime is Regime.MULTI_MODAL


@given(st.floats(0, 10), st.lists(st.floats(0, 5), min_size=5, max_size=5))
def test_total_combination_and_alpha_zero(alpha, vals):
    comps = {k: torch.tensor(v, dtype=torch.float64) for k, v in zip(S_CUD_KEYS, vals)}
    comps["mfm"] = torch.tensor(vals[4], dtype=torch.float64)
    rep = loss_total("single_modal", comps, alpha)
    assert abs(float(rep.total) - (sum(vals[:4]) + alpha * vals[4])) < 1e-6
    no_mfm = loss_total("single_modal", comps, 0.0)
    assert abs(float(no_mfm.total) - sum(vals[:4])) < 1e-9


def test_total_regime_mismatch():
    with pytest.raises(ContractError):
        loss_total("multi_modal", {k: torch.tensor(0.0) for k in S_CUD_KEYS})
    with pytest.raises(ContractError):
        loss_total("single_modal", {"m_com": torch.tensor(0.0), "m_uni": torch.tensor(0.0)})


def test_report_json_record():
    comps = {k: torch.tensor(0.5) for k in MCUD_KEYS}
    rec = json.loads(loss_total("multi_modal", comps).to_json(step=3))
    assert rec == {"step": 3, "regime": "multi_modal", "total": 1.0, "components": {"m_com": 0.5, "m_uni": 0.5}}


def test_check_finite_names_component():
    rep = LossReport(torch.tensor(1.0), {"s_cud_common": torch.tensor(math.nan)}, Regime.SINGLE_MODAL)
    with pytest.raises(NumericError, match="s_cud_common"):
        check_finite(rep)


# ---- the composite model -------------------------------------------------------


def micro_batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    x1, x2 = torch.rand(2, 1, 3, 8, 8, generator=g, dtype=torch.float64)
    targets = tuple(torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))
    return x, x1, x2, targets


def test_zero_loss_fixed_point_in_single_modal_mode():
    x = rand((1, 3, 8, 8), 0)
    for alpha in (0.0, 0.1, 3.0):
        comps = loss_s_cud(x, x, x, x, x, x, x, x)
        comps["mfm"] = loss_mfm(x, x)
        assert float(loss_total("single_modal", comps, alpha).total) == 0


def test_full_loss_gradient_matches_central_differences():
    """Every trainable tensor: three random directional derivatives plus up to
    12 single entries against central differences (64-bit)."""
    torch.manual_seed(0)
    net = FusionNetwork(micro_model_config(dim=16, patch=4)).double().train()
    x, x1, x2, targets = micro_batch()
    plan = sample_tokens(net.geometry(x).num_tokens, 0.5, seed=0)
    errors = sampled_gradient_check(lambda: net.single_modal_loss(x, x1, x2, targets, 0.1, plan).total, net)
    checked = {k: v for k, v in errors.items() if v is not None}
    # no gradient path only for the latent heads, which serve the multi-modal losses
    assert all(k.startswith("latent_heads.") for k, v in errors.items() if v is None)
    assert len(checked) > 20
    worst = max(checked, key=checked.get)
    assert checked[worst] < 1e-2, (worst, checked[worst])
