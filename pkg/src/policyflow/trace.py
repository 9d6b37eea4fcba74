"""Flow traces: iterates plus per-step diagnostics, shared by every dynamic."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measures import (DiscreteMeasure, RewardField, free_energy, gibbs_policy,
                       total_variation)

TRACE_COLUMNS = ("step", "time", "free_energy", "entropy", "expected_reward",
                 "tv_to_gibbs", "w2eps_to_gibbs", "residual")


@dataclass
class FlowTrace:
    """Iterates of a dynamic with one diagnostic row per stored measure.

    ``w2eps_to_gibbs`` is the entropic transport cost ``<C, P>`` to the Gibbs
    policy at ``diag_eps`` (NaN when disabled); ``residual`` is the
    Fokker-Planck stationarity residual (NaN for policies with empty cells).
    """

    reward: RewardField
    beta: float
    stepper: str = ""
    diag_eps: float | None = None
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    measures: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.gibbs = gibbs_policy(self.reward, self.beta)
        self._g0 = None

    def record(self, step: int, time: float, pi: DiscreteMeasure) -> dict:
        # local import: fokker_planck itself builds traces
        from .fokker_planck import stationary_residual
        from .sinkhorn import sinkhorn_cost

        if self.times and not time > self.times[-1]:
            raise ValueError(f"trace times must increase (got {time} after {self.times[-1]})")
        fe = free_energy(pi, self.reward, self.beta)
        w2 = math.nan
        if self.diag_eps is not None:
            res = sinkhorn_cost(pi, self.gibbs, self.diag_eps, tol=1e-10)
            w2 = res.cost
        res_fp = stationary_residual(pi, self.reward, self.beta) if pi.is_positive() else math.nan
        row = {
            "step": step,
            "time": time,
            "free_energy": fe.free_energy,
            "entropy": fe.entropy,
            "expected_reward": fe.expected_reward,
            "tv_to_gibbs": total_variation(pi, self.gibbs),
            "w2eps_to_gibbs": w2,
            "residual": res_fp,
        }
        self.steps.append(step)
        self.times.append(time)
        self.measures.append(pi)
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    @property
    def final(self) -> DiscreteMeasure:
        return self.measures[-1]

    def __len__(self):
        return len(self.rows)
