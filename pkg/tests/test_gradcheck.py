import pytest

from pblsim.field.gradcheck import SELECTORS, grad_check


@pytest.mark.parametrize("selector", ["n_distance", "n_incidence", "apply_model", "render_ray",
                                      "render_rays", "reprojection"])
def test_selectors_pass(selector):
    rep = grad_check(selector, n_points=100)
    assert rep.n_compared >= 100
    assert rep.max_rel_error < 1e-4, rep.worst


def test_zero_case():
    rep = grad_check("zero", n_points=20)
    assert rep.all_zero and rep.max_rel_error == 0.0


def test_bad_selector():
    with pytest.raises(ValueError):
        grad_check("nope")
    with pytest.raises(ValueError):
        grad_check("zero", n_points=0)
    assert "render_ray" in SELECTORS
