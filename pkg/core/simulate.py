"""
模拟队列生成模块

离散时间 t = 0..T_max 的队列，存在时变混杂：
- L(0) = sqrt(U[25, 1000])
- t ≥ 1 时按治疗方案给出的概率（依赖当前 L）开始治疗，开始后持续
- 区间 [t, t+1) 内事件概率 clamp(a0 + aB·B(t) + aL·(L_ref − L(t)), 0, 1)
- 未治疗时 L 每期下降，治疗时上升，另加高斯噪声
- T_max 时仍无事件者删失

反事实臂对同一批个体不提供治疗，默认与观测臂共享随机数。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .constants import (
    CENSOR_COL,
    DEFAULT_T_MAX,
    EVENT_COL,
    ID_COL,
    TIME_COL,
    TREAT_COL,
)
from .counterfactual import NoTreatedPersonTime
from .error_handler import CausalAttError
from .panel import Panel, observed_col

logger = logging.getLogger(__name__)

COVARIATE = "L"
COUNTERFACTUAL_PREFIX = "cf-"
REGIMES = ("1", "2", "3", "randomized")
# 随机子流编号：(重复序号, 方案编号)
REGIME_CODES = {"1": 1, "2": 2, "3": 3, "randomized": 4}
# 各方案治疗概率在 logit 尺度上对 L 的斜率
REGIME_SLOPES = {"1": -0.08, "2": -0.02, "3": 0.08, "randomized": 0.0}
CLAMP_RATE_LIMIT = 0.01


# 自定义异常类
class SimulationError(CausalAttError):
    """模拟相关基础异常类"""

    pass


class InvalidConfig(SimulationError):
    """模拟参数无效"""

    pass


@dataclass(frozen=True)
class RegimeConfig:
    """一个治疗方案下的生成参数"""

    regime: str = "1"
    n: int = 1000
    t_max: int = DEFAULT_T_MAX
    seed: int = 0
    replicate: int = 0
    # 事件概率
    a0: float = 0.005
    aB: float = -0.005
    aL: float = 0.001
    L_ref: float = 50.0
    # 协变量漂移
    drift_untreated: float = -1.0
    drift_treated: float = 0.5
    noise_sd: float = 1.0
    # 治疗概率：logit(p) = logit(base_prob) + slope·(L − L_center)
    base_prob: float = 0.07
    slope: float | None = None
    L_center: float = 16.0
    # 随机失访（默认关闭）
    dropout_prob: float = 0.0
    dropout_slope: float = 0.0
    common_random_numbers: bool = True

    def __post_init__(self):
        object.__setattr__(self, "regime", str(self.regime))

    @property
    def treatment_slope(self) -> float:
        if self.regime == "randomized":
            return 0.0
        return REGIME_SLOPES[self.regime] if self.slope is None else self.slope

    def validate(self) -> None:
        """检查参数，无效时抛出 InvalidConfig"""
        problems = []
        if self.regime not in REGIMES:
            problems.append(f"regime must be one of {REGIMES}")
        if self.n < 1:
            problems.append("n must be >= 1")
        if self.t_max < 1:
            problems.append("t_max must be >= 1")
        if not 0.0 < self.base_prob < 1.0:
            problems.append("base_prob must lie in (0, 1)")
        if not 0.0 <= self.dropout_prob < 1.0:
            problems.append("dropout_prob must lie in [0, 1)")
        if self.noise_sd < 0:
            problems.append("noise_sd must be >= 0")
        if problems:
            raise InvalidConfig("; ".join(problems))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            self.seed, spawn_key=(self.replicate, REGIME_CODES[self.regime])
        )

    def treatment_probability(self, L: np.ndarray) -> np.ndarray:
        if self.regime == "randomized":
            return np.full(L.shape, self.base_prob)
        return expit(logit(self.base_prob) + self.treatment_slope * (L - self.L_center))


@dataclass(frozen=True, eq=False)
class SimCohort:
    """一次生成的结果

    observed 与 counterfactual_untreated 共享个体编号与 L(0)；
    truth 为受治风险集上真实事件概率差的累积和。
    """

    config: RegimeConfig
    observed: Panel
    counterfactual_untreated: Panel
    truth: pd.DataFrame
    diagnostics: dict[str, Any] = field(default_factory=dict)


@dataclass
class _Arm:
    L: np.ndarray
    B: np.ndarray
    prob: np.ndarray
    exit_t: np.ndarray
    event: np.ndarray
    clamped: int
    person_intervals: int


@dataclass
class _Draws:
    L0: np.ndarray
    eps: np.ndarray
    u_event: np.ndarray
    v_treat: np.ndarray
    u_drop: np.ndarray


def _draw(rng: np.random.Generator, n: int, T: int, L0: np.ndarray | None = None) -> _Draws:
    base = np.sqrt(rng.uniform(25.0, 1000.0, size=n))
    return _Draws(
        L0=base if L0 is None else L0,
        eps=rng.standard_normal((n, T)),
        u_event=rng.random((n, T)),
        v_treat=rng.random((n, T + 1)),
        u_drop=rng.random((n, T)),
    )


def _simulate_arm(cfg: RegimeConfig, draws: _Draws, offer_treatment: bool) -> _Arm:
    n, T = cfg.n, cfg.t_max
    L = np.empty((n, T + 1))
    B = np.zeros((n, T + 1), dtype=np.int64)
    prob = np.zeros((n, T))
    exit_t = np.full(n, T, dtype=np.int64)
    event = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    clamped = 0
    person_intervals = 0

    L[:, 0] = draws.L0
    for t in range(T + 1):
        if t >= 1:
            B[:, t] = B[:, t - 1]
            if offer_treatment:
                start = (B[:, t - 1] == 0) & (
                    draws.v_treat[:, t] < cfg.treatment_probability(L[:, t])
                )
                B[start, t] = 1
        if t == T:
            break

        raw = cfg.a0 + cfg.aB * B[:, t] + cfg.aL * (cfg.L_ref - L[:, t])
        prob[:, t] = np.clip(raw, 0.0, 1.0)
        clamped += int(np.sum(alive & ((raw < 0.0) | (raw > 1.0))))
        person_intervals += int(alive.sum())

        hit = alive & (draws.u_event[:, t] < prob[:, t])
        exit_t[hit] = t
        event[hit] = True
        alive &= ~hit

        if cfg.dropout_prob > 0:
            p_drop = expit(
                logit(cfg.dropout_prob) + cfg.dropout_slope * (L[:, t] - cfg.L_center)
            )
            drop = alive & (draws.u_drop[:, t] < p_drop)
            exit_t[drop] = t
            alive &= ~drop

        drift = np.where(B[:, t] == 1, cfg.drift_treated, cfg.drift_untreated)
        L[:, t + 1] = L[:, t] + drift + cfg.noise_sd * draws.eps[:, t]

    return _Arm(L, B, prob, exit_t, event, clamped, person_intervals)


def _arm_panel(arm: _Arm, ids: np.ndarray) -> Panel:
    T = arm.L.shape[1] - 1
    subj, t = np.nonzero(np.arange(T + 1)[None, :] <= arm.exit_t[:, None])
    at_exit = t == arm.exit_t[subj]
    frame = pd.DataFrame(
        {
            ID_COL: ids[subj],
            TIME_COL: t,
            TREAT_COL: arm.B[subj, t],
            EVENT_COL: (at_exit & arm.event[subj]).astype(np.int64),
            CENSOR_COL: (at_exit & ~arm.event[subj]).astype(np.int64),
            COVARIATE: arm.L[subj, t],
            observed_col(COVARIATE): np.ones(len(t), dtype=np.int64),
        }
    )
    return Panel.from_frame(frame, (COVARIATE,))


def _truth(observed: _Arm, untreated: _Arm) -> pd.DataFrame:
    T = observed.prob.shape[1]
    B = observed.B[:, :T]
    first = np.where(B.any(axis=1), B.argmax(axis=1), np.inf)
    grid = np.arange(T + 1)
    diff = np.zeros(T + 1)
    r = np.zeros(T + 1, dtype=np.int64)
    for u in range(T):
        at_risk = (first < u) & (observed.exit_t >= u)
        r[u] = int(at_risk.sum())
        if r[u]:
            diff[u] = float(np.mean(observed.prob[at_risk, u] - untreated.prob[at_risk, u]))
    return pd.DataFrame(
        {"t": grid, "r": r, "hazard_difference": diff, "true_att": np.cumsum(diff)}
    )


def generate_cohort(config: RegimeConfig) -> SimCohort:
    """生成一个方案下的队列

    Args:
        config: 生成参数；随机流由 (seed, replicate, 方案编号) 唯一决定

    Returns:
        SimCohort

    Raises:
        InvalidConfig: 参数无效
    """
    config.validate()
    n, T = config.n, config.t_max
    seq = config.seed_sequence()
    rng = np.random.default_rng(seq)
    draws = _draw(rng, n, T)
    if config.common_random_numbers:
        cf_draws = draws
    else:
        cf_draws = _draw(np.random.default_rng(seq.spawn(1)[0]), n, T, L0=draws.L0)

    ids = np.array([f"{k + 1:05d}" for k in range(n)])
    observed = _simulate_arm(config, draws, offer_treatment=True)
    untreated = _simulate_arm(config, cf_draws, offer_treatment=False)

    obs_panel = _arm_panel(observed, ids)
    cf_panel = _arm_panel(untreated, ids)
    treated = int(np.isfinite(obs_panel.treatment_start()).sum())
    clamp_rate = observed.clamped / max(observed.person_intervals, 1)
    diagnostics = {
        "subjects": n,
        "treated_share": treated / n,
        "event_share": float(observed.event.mean()),
        "clamped": observed.clamped,
        "clamp_rate": clamp_rate,
        "person_intervals": observed.person_intervals,
    }
    if clamp_rate > CLAMP_RATE_LIMIT:
        logger.warning(
            f"方案 {config.regime}: {clamp_rate:.2%} 的人-区间事件概率被截到 [0, 1]"
        )
    logger.debug(
        f"方案 {config.regime} 第 {config.replicate} 次生成: "
        f"受治比例 {diagnostics['treated_share']:.3f}, "
        f"事件比例 {diagnostics['event_share']:.3f}"
    )
    return SimCohort(
        config=config,
        observed=obs_panel,
        counterfactual_untreated=cf_panel,
        truth=_truth(observed, untreated),
        diagnostics=diagnostics,
    )


def build_full_counterfactual(cohort: SimCohort) -> Panel:
    """受治个体治疗开始之后 (t > S) 的两条臂：观测臂与未治疗臂副本（编号 cf-<id>）

    风险集与 ATT 的受治风险集 {S < t} 一致，对照只来自同一批个体的未治疗臂，
    治疗系数的累积曲线即模拟的 ATT 参考。

    Raises:
        NoTreatedPersonTime: 没有受治个体
    """
    obs = cohort.observed
    starts = obs.treatment_start()
    treated = starts[np.isfinite(starts.to_numpy())]
    if treated.empty:
        raise NoTreatedPersonTime("no treated subjects for the simulated reference")

    def after_start(frame: pd.DataFrame) -> pd.DataFrame:
        S = frame[ID_COL].map(treated)
        return frame[S.notna() & (frame[TIME_COL] > S)]

    treated_arm = after_start(obs.frame)
    untreated_arm = after_start(cohort.counterfactual_untreated.frame).copy()
    untreated_arm[ID_COL] = COUNTERFACTUAL_PREFIX + untreated_arm[ID_COL]
    combined = pd.concat([treated_arm, untreated_arm], ignore_index=True)
    return obs.with_frame(combined)


def regime_configs(base: RegimeConfig, regimes: list[str] | tuple[str, ...]) -> list[RegimeConfig]:
    """同一组参数在多个方案下的配置"""
    return [replace(base, regime=str(r)) for r in regimes]
