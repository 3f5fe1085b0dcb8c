import pytest

from gradcases import CASES, run_case
from helpers import FD_TOL


@pytest.mark.parametrize("name", list(CASES))
def test_analytic_gradient_matches_central_differences(name):
    assert run_case(name) < FD_TOL


@pytest.mark.parametrize("name", ["loss_tcl", "loss_cox", "loss_c2 (full objective)"])
def test_gradient_agreement_holds_for_other_draws(name):
    assert run_case(name, seed=3) < FD_TOL
