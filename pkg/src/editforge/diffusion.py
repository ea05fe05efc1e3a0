"""Noise schedule, denoising objective, and guidance composition.

The guidance composition nests three conditionings in a fixed order
(image, then text, then visual prompt); each guidance scale extrapolates
between adjacent estimates. Null conditions collapse adjacent estimates,
so the sampler spends 4/3/2/1 model evaluations per step depending on
which conditions exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import Tensor, from_array, mean, mul, sub


@dataclass
class NoiseSchedule:
    """Per-step betas with derived alphas and their running product."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Running product at 1-indexed step t."""
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])


@dataclass
class ConditionSet:
    """The conditioning triple; None encodes the null conditioning."""

    c_i: object | None = None
    c_t: object | None = None
    c_v: object | None = None


@dataclass
class GuidanceScales:
    s_i: float = 1.5
    s_t: float = 7.0
    s_v: float = 1.0

    def require_guided(self) -> None:
        """Guided mode shifts mass toward the conditional, so scales below
        one are rejected there (exactly one is permitted)."""
        if min(self.s_i, self.s_t, self.s_v) < 1.0:
            raise ConfigError(f"guided mode needs scales >= 1, got {self}")


@dataclass
class TrainingExample:
    x: Tensor
    conditions: ConditionSet
    task_id: str


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with derived alphas."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_noise(x0: Tensor, t: int, eps: Tensor,
                  schedule: NoiseSchedule) -> Tensor:
    """Noise the clean input to step t: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    return Tensor(math.sqrt(ab) * x0.values + math.sqrt(1.0 - ab) * eps.values)


def condition_dropout(conditions: ConditionSet, p_i: float, p_t: float,
                      p_v: float, rng: np.random.Generator) -> ConditionSet:
    """Independently null each slot with its probability.

    One uniform draw per slot in a fixed order, so results are
    reproducible under a fixed generator state.
    """
    for p in (p_i, p_t, p_v):
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"dropout probability {p} outside [0, 1]")
    keep_i = rng.uniform() >= p_i
    keep_t = rng.uniform() >= p_t
    keep_v = rng.uniform() >= p_v
    return ConditionSet(
        conditions.c_i if keep_i else None,
        conditions.c_t if keep_t else None,
        conditions.c_v if keep_v else None,
    )


def training_loss(model, example: TrainingExample, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> Tensor:
    """Mean squared error between drawn noise and the model's prediction.

    Draws one (t, eps) pair from the generator; differentiable with
    respect to the model's parameters.
    """
    t = int(rng.integers(1, schedule.T + 1))
    eps = from_array(rng.normal(size=example.x.shape))
    z_t = forward_noise(example.x, t, eps, schedule)
    pred = model(z_t, t, example.conditions)
    if pred.shape != eps.shape:
        raise ContractError(
            f"model output shape {pred.shape} != noise shape {eps.shape}")
    diff = sub(eps, pred)
    return mean(mul(diff, diff))


def cfg_compose(e_null: Tensor, e_i: Tensor, e_it: Tensor, e_itv: Tensor,
                scales: GuidanceScales, three_condition: bool = True) -> Tensor:
    """Blend the nested conditional estimates into one guided estimate.

    out = e_null + s_i*(e_i - e_null) + s_t*(e_it - e_i)
                 + s_v*(e_itv - e_it)            [three-condition mode]

    In two-condition mode the visual term is omitted and e_itv ignored.
    The difference form is kept verbatim: when adjacent estimates are
    equal their term vanishes exactly, so null conditions and the
    two-condition reduction are exact, not approximate.
    """
    for e in (e_i, e_it, e_itv):
        if e.shape != e_null.shape:
            raise ShapeError(f"estimate shape {e.shape} != {e_null.shape}")
    out = (e_null.values
           + scales.s_i * (e_i.values - e_null.values)
           + scales.s_t * (e_it.values - e_i.values))
    if three_condition:
        out = out + scales.s_v * (e_itv.values - e_it.values)
    return Tensor(out)


def sample(model, conditions: ConditionSet, scales: GuidanceScales,
           schedule: NoiseSchedule, steps: int, rng: np.random.Generator,
           shape: tuple[int, ...] | None = None) -> Tensor:
    """Ancestral denoising from unit Gaussian noise.

    ``model`` is a callable (z_t: Tensor, t: int, conditions) -> Tensor.
    Each step runs the guidance composition over the required estimates;
    null condition slots reuse the adjacent estimate instead of paying for
    another model evaluation. Deterministic under a fixed generator.
    """
    if steps < 1 or steps > schedule.T:
        raise ContractError(f"steps must be in 1..{schedule.T}, got {steps}")
    if shape is None:
        if conditions.c_i is None:
            raise ContractError("shape required when no image condition exists")
        shape = tuple(np.asarray(getattr(conditions.c_i, "values",
                                         conditions.c_i)).shape)

    # strictly decreasing 1-indexed timesteps, evenly strided
    ts = np.unique(np.linspace(schedule.T, 1, steps).round().astype(int))[::-1]

    null_set = ConditionSet(None, None, None)
    i_set = ConditionSet(conditions.c_i, None, None)
    it_set = ConditionSet(conditions.c_i, conditions.c_t, None)

    z = rng.normal(size=shape)
    for i, t in enumerate(ts):
        z_t = Tensor(z)
        e_null = model(z_t, int(t), null_set)
        e_i = e_null if conditions.c_i is None else model(z_t, int(t), i_set)
        e_it = e_i if conditions.c_t is None else model(z_t, int(t), it_set)
        e_itv = e_it if conditions.c_v is None else model(z_t, int(t), conditions)
        guided = cfg_compose(e_null, e_i, e_it, e_itv, scales).values

        ab_t = schedule.alpha_bar(int(t))
        x0_pred = (z - math.sqrt(1.0 - ab_t) * guided) / math.sqrt(ab_t)
        if i + 1 < len(ts):
            ab_prev = schedule.alpha_bar(int(ts[i + 1]))
            var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
            var = max(var, 0.0)
            direction = math.sqrt(max(1.0 - ab_prev - var, 0.0)) * guided
            z = (math.sqrt(ab_prev) * x0_pred + direction
                 + math.sqrt(var) * rng.normal(size=shape))
        else:
            z = x0_pred
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent at step index {i} (t={t})")
    return Tensor(z)
