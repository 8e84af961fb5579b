"""Annealing policies for the regularizer weight beta.

Three shapes: a constant weight, a single linear ramp (monotonic), and the
ramp repeated over several cycles (cyclical). The cyclical schedule restarts
at zero at each cycle boundary so the model periodically re-learns to use
the latent code before regularization tightens again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, ContractError

KINDS = ("constant", "monotonic", "cyclical")


@dataclass(frozen=True)
class ScheduleConfig:
    """Beta-annealing policy.

    :param kind: one of constant | monotonic | cyclical.
    :param beta_max: peak weight, in [0, 1].
    :param total_steps: training horizon the schedule is laid out over.
    :param cycles: number of ramp repetitions (cyclical only).
    :param ramp_ratio: fraction of a cycle spent ramping from 0 to beta_max.
    """

    kind: str = "cyclical"
    beta_max: float = 1.0
    total_steps: int = 2000
    cycles: int = 4
    ramp_ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"schedule kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.beta_max <= 1.0:
            raise ConfigError(f"beta_max must be in [0, 1], got {self.beta_max}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")
        if not 0.0 < self.ramp_ratio <= 1.0:
            raise ConfigError(f"ramp_ratio must be in (0, 1], got {self.ramp_ratio}")


def beta_at(step: int, cfg: ScheduleConfig) -> float:
    """Regularizer weight at a global update step.

    Steps at or beyond total_steps hold the final value. Monotonic is the
    one-cycle special case of the cyclical ramp, so the two coincide
    pointwise when cycles=1.
    """
    if step < 0:
        raise ContractError(f"beta_at: step must be non-negative, got {step}")
    step = min(step, cfg.total_steps - 1)
    if cfg.kind == "constant":
        return cfg.beta_max
    if cfg.kind == "monotonic":
        period = cfg.total_steps
    else:
        period = math.ceil(cfg.total_steps / cfg.cycles)
    tau = (step % period) / period
    return cfg.beta_max * min(1.0, tau / cfg.ramp_ratio)
