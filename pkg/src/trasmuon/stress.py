"""Mechanistic stress study: conditioned quadratic objective, column-localized
burst injection, and the sequential training loop with per-step closed-loop
diagnostics.

The objective is f(W) = 0.5 * ||A W B - T||_F^2 with SPD factors of a target
condition number. Bursts perturb the optimizer's internal signal (momentum
columns, or additive gradient noise) while leaving f itself unchanged, so any
behavioral difference is attributable to the optimizer's response.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import conditioned_spd, conditioned_spectrum, random_orthogonal
from .optim import ParamState, StepResult, TrasMuonHyper, STEP_FUNCTIONS

DIVERGENCE_THRESHOLD = 1e12


@dataclass
class QuadraticProblem:
    a: np.ndarray
    b: np.ndarray
    t_target: np.ndarray
    kappa: float
    v_basis: np.ndarray
    fix_v: bool
    seed: int

    @property
    def dim(self) -> int:
        return self.a.shape[0]


def build_problem(d: int, kappa: float, fix_v: bool, seed: int) -> QuadraticProblem:
    """Conditioned quadratic instance; A and B get independent rotations and
    the target has i.i.d. standard normal entries."""
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if kappa < 1.0:
        raise ValueError(f"condition number must be >= 1, got {kappa}")
    children = np.random.SeedSequence(seed).spawn(3)
    rng_a = np.random.default_rng(children[0])
    rng_b = np.random.default_rng(children[1])
    rng_t = np.random.default_rng(children[2])
    # Scalar rescaling preserves the condition number while centering the
    # spectrum on 1, keeping the objective desk-scaled for any kappa.
    scale = 1.0 / math.sqrt(kappa)
    a = scale * conditioned_spd(d, kappa, rng_a)
    v = random_orthogonal(d, rng_b)
    sigma_b = scale * conditioned_spectrum(d, kappa)
    b = (v * sigma_b[np.newaxis, :]) @ v.T
    t_target = rng_t.standard_normal((d, d))
    return QuadraticProblem(a=a, b=b, t_target=t_target, kappa=kappa,
                            v_basis=v, fix_v=fix_v, seed=seed)


def quadratic_loss(w: np.ndarray, p: QuadraticProblem) -> float:
    resid = p.a @ w @ p.b - p.t_target
    return 0.5 * float(np.linalg.norm(resid)) ** 2


def quadratic_grad(w: np.ndarray, p: QuadraticProblem) -> np.ndarray:
    resid = p.a @ w @ p.b - p.t_target
    return p.a.T @ resid @ p.b.T


@dataclass(frozen=True)
class BurstConfig:
    """Column-localized burst injection schedule.

    ``amplitude`` is the multiplicative column factor a > 1 in momentum mode,
    or the relative additive scale rho > 0 in gradient mode.
    """

    period: int = 100
    count: int = 4
    amplitude: float = 30.0
    mode: str = "momentum"  # "momentum" | "gradient"
    start_step: int = 200
    seed: int = 0
    cap: Optional[float] = None  # gradient mode: absolute cap on the amplitude
    persist: bool = True  # momentum mode: bursted momentum replaces stored state

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("burst period must be >= 1")
        if self.count < 1:
            raise ValueError("burst column count must be >= 1")
        if self.mode not in ("momentum", "gradient"):
            raise ValueError(f"unknown burst mode {self.mode!r}")

    def is_event(self, step: int) -> bool:
        return step >= self.start_step and (step - self.start_step) % self.period == 0


def inject_momentum_burst(
    m: np.ndarray,
    cfg: BurstConfig,
    step: int,
    rng: np.random.Generator,
    fix_v: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Multiply a random subset of momentum columns on event steps.

    With ``fix_v`` false the burst is conjugated by a fresh random orthogonal
    column mixing, dispersing the injected energy across columns so that
    axis-aligned clipping has no meaningful target.
    Returns ``(m_tilde, burst_columns)``; off event steps the input is
    returned unchanged with an empty index set.
    """
    if cfg.mode != "momentum":
        raise ValueError("inject_momentum_burst requires momentum mode")
    d = m.shape[1]
    if cfg.count >= d:
        raise ValueError(f"burst column count {cfg.count} must be < {d}")
    if not cfg.is_event(step):
        return m, np.empty(0, dtype=np.intp)
    cols = rng.choice(d, size=cfg.count, replace=False)
    if fix_v:
        m_tilde = m.copy()
        m_tilde[:, cols] *= cfg.amplitude
        return m_tilde, cols
    q = random_orthogonal(d, rng)
    mixed = m @ q
    mixed[:, cols] *= cfg.amplitude
    return mixed @ q.T, cols


def inject_gradient_burst(
    g: np.ndarray,
    cfg: BurstConfig,
    step: int,
    rng: np.random.Generator,
    eps: float = 1e-8,
) -> np.ndarray:
    """Add a normalized random direction to selected columns, with amplitude
    scaled relative to the RMS gradient magnitude."""
    if cfg.mode != "gradient":
        raise ValueError("inject_gradient_burst requires gradient mode")
    if not cfg.is_event(step):
        return g
    rows, cols_n = g.shape
    cols = rng.choice(cols_n, size=cfg.count, replace=False)
    alpha = cfg.amplitude * float(np.linalg.norm(g)) / math.sqrt(rows * cols_n)
    if cfg.cap is not None:
        alpha = min(alpha, cfg.cap)
    g_tilde = g.copy()
    for j in cols:
        u = rng.standard_normal(rows)
        g_tilde[:, j] += alpha * u / (np.linalg.norm(u) + eps)
    return g_tilde


@dataclass
class StepDiagnostics:
    step: int
    loss: float
    r_max: float
    r_q95: float
    c_used_min: float
    delta_norm: float
    burst: bool
    degenerate: bool


@dataclass
class Trajectory:
    steps: list[StepDiagnostics] = field(default_factory=list)
    diverged: bool = False

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])


def init_w(d: int, seed: int) -> np.ndarray:
    """Standard normal entries scaled by 1/sqrt(d)."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((d, d)) / math.sqrt(d)


def run_stress(
    problem: QuadraticProblem,
    optimizer: str,
    hyper: TrasMuonHyper,
    burst: Optional[BurstConfig],
    total_steps: int,
    init_seed: int,
) -> tuple[Trajectory, np.ndarray]:
    """Full-batch loop over the quadratic with optional burst injection.

    Momentum-mode bursts intercept M right after the momentum update and
    before direction/energy computation, so both the update direction and
    the clip's energy signal see the bursted momentum. Deterministic given
    (problem seed, init seed, burst seed, hyper).
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if optimizer not in STEP_FUNCTIONS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    step_fn = STEP_FUNCTIONS[optimizer]
    d = problem.dim
    w = init_w(d, init_seed)
    state = ParamState.zeros((d, d))
    burst_rng = np.random.default_rng(burst.seed) if burst is not None else None
    traj = Trajectory()

    for step in range(1, total_steps + 1):
        loss = quadratic_loss(w, problem)
        if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
            traj.diverged = True
            traj.steps.append(StepDiagnostics(step, loss, 0.0, 0.0, 1.0, 0.0,
                                              False, False))
            break
        g = quadratic_grad(w, problem)

        transform = None
        if burst is not None and burst.mode == "gradient":
            g = inject_gradient_burst(g, burst, step, burst_rng, eps=hyper.eps)
        elif burst is not None and burst.mode == "momentum" and burst.is_event(step):
            def transform(m, t, _b=burst, _r=burst_rng, _s=step):
                m_tilde, cols = inject_momentum_burst(m, _b, _s, _r, problem.fix_v)
                return m_tilde, cols.size > 0, _b.persist

        w, state, res = step_fn(w, g, state, hyper, momentum_transform=transform)
        is_burst = res.burst or (burst is not None and burst.mode == "gradient"
                                 and burst.is_event(step))
        traj.steps.append(StepDiagnostics(
            step=step,
            loss=loss,
            r_max=res.r_max,
            r_q95=res.r_q95,
            c_used_min=res.c_used_min,
            delta_norm=res.delta_norm,
            burst=is_burst,
            degenerate=res.degenerate,
        ))
    return traj, w
