"""测试共享夹具"""

import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.panel import Panel  # noqa: E402
from core.simulate import RegimeConfig, generate_cohort  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run full-size simulation tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size Monte Carlo runs (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_panel(
    records: list[tuple],
    covariates: tuple[str, ...] = ("L",),
    baselines: tuple[str, ...] = (),
) -> Panel:
    """由 (id, t, treat, event, censor, 协变量..., 基线...) 元组构造面板"""
    columns = ["id", "t", "treat", "event", "censor", *covariates, *baselines]
    return Panel.from_frame(pd.DataFrame(records, columns=columns), covariates, baselines)


def subject_rows(
    sid: str,
    values: list[float],
    start: float = np.inf,
    event: bool = False,
    censor: bool = False,
) -> list[tuple]:
    """一个个体的连续行：values[t] 为 L(t)，最后一行带事件或删失标记"""
    last = len(values) - 1
    return [
        (
            sid,
            t,
            int(t >= start),
            int(event and t == last),
            int(censor and t == last),
            value,
        )
        for t, value in enumerate(values)
    ]


@pytest.fixture
def nelson_aalen_panel() -> Panel:
    """3 个个体，t=2 时 1 个事件"""
    rows = (
        subject_rows("a", [1.0, 1.0, 1.0], event=True)
        + subject_rows("b", [1.0, 1.0, 1.0])
        + subject_rows("c", [1.0, 1.0, 1.0])
    )
    return make_panel(rows)


@pytest.fixture(scope="session")
def small_cohort():
    """固定种子的小规模模拟队列（方案 1）"""
    return generate_cohort(RegimeConfig(regime="1", n=400, seed=11))


@pytest.fixture(scope="session")
def randomized_cohort():
    return generate_cohort(RegimeConfig(regime="randomized", n=400, seed=11))


@pytest.fixture
def tmp_csv(tmp_path):
    def _write(frame: pd.DataFrame, name: str = "panel.csv") -> str:
        path = tmp_path / name
        frame.to_csv(path, index=False)
        return str(path)

    return _write
