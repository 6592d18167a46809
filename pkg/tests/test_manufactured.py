import numpy as np
import pytest

from polyieti.errors import ConfigError
from polyieti.manufactured import SOLUTIONS, get_solution


def test_trig_partials_are_phase_shifts():
    u = get_solution("trig")
    x = np.linspace(-1.0, 2.0, 7)
    y = np.linspace(0.0, 1.5, 7)
    h = 1e-6
    # central differences against the closed forms
    dux = (u.value(x + h, y) - u.value(x - h, y)) / (2 * h)
    duy = (u.value(x, y + h) - u.value(x, y - h)) / (2 * h)
    np.testing.assert_allclose(u.partial(1, 0, x, y), dux, atol=1e-8)
    np.testing.assert_allclose(u.partial(0, 1, x, y), duy, atol=1e-8)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_trig_load_is_power_of_two(m):
    u = get_solution("trig")
    x, y = 0.37, 0.81
    assert u.load(m, x, y) == pytest.approx(2.0**m * u.value(x, y), rel=1e-14)


@pytest.mark.parametrize("name", sorted(SOLUTIONS))
def test_generic_load_matches_finite_differences(name):
    u = get_solution(name)
    x, y = 0.43, 0.29
    h = 1e-3
    lap = (
        u.value(x + h, y)
        + u.value(x - h, y)
        + u.value(x, y + h)
        + u.value(x, y - h)
        - 4 * u.value(x, y)
    ) / h**2
    assert u.load(1, x, y) == pytest.approx(-lap, abs=1e-5)


def test_polynomial_partials_exact():
    u = get_solution("biquadratic")  # x^2 y^2 term has coefficient 0.5
    assert u.partial(2, 2, 0.3, 0.9) == pytest.approx(0.5 * 4.0)
    assert u.partial(3, 0, 0.3, 0.9) == 0.0


def test_partial_stack_order():
    u = get_solution("trig")
    idx = [(0, 0), (1, 0), (0, 1)]
    st = u.partial_stack(idx, 0.2, 0.4)
    assert st.shape == (3,)
    for row, (a, b) in zip(st, idx):
        assert row == pytest.approx(u.partial(a, b, 0.2, 0.4))


def test_unknown_solution_rejected():
    with pytest.raises(ConfigError):
        get_solution("nope")
