import pytest

from gradsuite import CASES, TOLERANCE
from oracles import grad_rel_error


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [100, 101, 102])
def test_analytic_gradient_matches_finite_differences(name, seed):
    fn, inputs = CASES[name](seed)
    assert grad_rel_error(fn, inputs) <= TOLERANCE
