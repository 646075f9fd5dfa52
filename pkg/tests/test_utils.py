import pytest

from core.utils import PipelineUtils


@pytest.mark.parametrize(
    ("grad_norm", "loglik", "expected"),
    [
        (5e-9, -3.0, True),
        (1e-6, -1.0, False),
        (1e-6, -1e4, True),
        (2e-8, 0.0, False),
    ],
)
def test_newton_converged_is_absolute_or_relative(grad_norm, loglik, expected):
    assert PipelineUtils.newton_converged(grad_norm, loglik) is expected


def test_parse_helpers():
    assert PipelineUtils.parse_name_list("L, age\nsex") == ["L", "age", "sex"]
    assert PipelineUtils.parse_percentile_pair("none") is None
    assert PipelineUtils.parse_percentile_pair("1,99") == (1.0, 99.0)
    with pytest.raises(ValueError):
        PipelineUtils.parse_percentile_pair("99,1")
    assert PipelineUtils.clamp_workers(100) == 20
