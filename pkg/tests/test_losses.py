import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from dtgan import losses as L
from dtgan.core import LossWeights

import loss_cases
from loss_cases import closed_form_cases, gradient_cases

CASES = closed_form_cases()


@pytest.mark.parametrize("name,got,want", CASES, ids=[c[0] for c in CASES])
def test_closed_form(name, got, want):
    assert got == pytest.approx(want, abs=1e-6)


@pytest.mark.parametrize("name,err", gradient_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_gradient_matches_finite_differences(name, err):
    assert err < 1e-6


def test_adv_g_monotone_decreasing():
    grid = torch.linspace(-20, 20, 401, dtype=torch.float64)
    vals = torch.stack([L.adv_loss_g(v) for v in grid])
    assert bool((vals[1:] < vals[:-1]).all())


def test_nonsaturating_matches_saturating_objective_for_d():
    # D maximizes log D(x) + log(1 - D(x~)); its minimized loss is the negation
    r, f = torch.tensor([0.3, -1.2]), torch.tensor([0.9, -0.4])
    lhs = L.adv_loss_d(r, f)
    rhs = -L.adv_objective_saturating(torch.sigmoid(r), torch.sigmoid(f))
    assert float(lhs) == pytest.approx(float(rhs), abs=1e-6)


def test_diversity_sums_exactly_six_pairs():
    calls = loss_cases.diversity_pair_calls()
    assert len(calls) == 6
    pairs = {frozenset(c) for c in calls}
    assert len(pairs) == 6  # all unordered pairs of four outputs


def test_diversity_requires_four_outputs():
    with pytest.raises(ValueError):
        L.diversity_loss({(0, 0): torch.zeros(1)})


def test_cls_target_out_of_range():
    with pytest.raises(ValueError):
        L.fg_cls_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        L.cycle_loss(torch.zeros(2, 3), torch.zeros(3, 2))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-50, 50))
def test_nonnegative_terms(a, b, logit):
    x = torch.full((2, 3), a)
    y = torch.full((2, 3), b)
    assert float(L.cycle_loss(x, y)) >= 0
    assert float(L.adv_loss_d(torch.tensor(logit), torch.tensor(-logit))) >= 0
    assert float(L.r1_penalty(lambda v: (v * b).sum(1), x)) >= 0


def test_report_csv_roundtrip(tmp_path):
    rep = L.make_report({"adv_d": 1.25, "cyc": 1 / 3, "ds": 0.5}, LossWeights(), step=0)
    path = tmp_path / "log.csv"
    path.write_text(L.report_csv_header() + "\n" + L.report_csv_row(7, rep) + "\n")
    ((step, back),) = L.read_report_csv(path)
    assert step == 7 and back == rep
    assert back.total_g == pytest.approx(1 / 3 - 0.5)


def test_report_flags_non_finite():
    rep = L.LossReport(cyc=math.nan, adv_d=math.inf)
    assert set(rep.non_finite()) == {"cyc", "adv_d"}
