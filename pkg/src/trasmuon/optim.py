"""Stateful optimizers over matrix parameters.

TrasMuon composes orthogonalized momentum (Newton-Schulz polar factor),
row-wise second-moment scaling, a global RMS-calibrated step size, and a
feature-wise (column-wise) damping-only clip driven by relative column
energies. Muon, NorMuon, and AdamW baselines share the same interfaces;
NorMuon is literally the TrasMuon path with the clip disabled, so ablation
identities hold bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import (
    DEFAULT_NS_COEFFS,
    column_energies,
    newton_schulz_polar,
    quantile,
)

# Transform applied to momentum after its EMA update and before direction
# and energy computation. Returns (m_used, burst_flag, persist_flag).
MomentumTransform = Callable[[np.ndarray, int], tuple[np.ndarray, bool, bool]]


@dataclass(frozen=True)
class TrasMuonHyper:
    """Scalar knobs shared by the Muon-family steps (AdamW reuses eta,
    beta1, beta2, eps, and weight_decay with its own conventions)."""

    eta: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.95
    eps: float = 1e-8
    t_ns: int = 5
    weight_decay: float = 0.0
    c_min: float = 0.1
    # Steep clip response: anomalous columns are damped hard once triggered.
    alpha: float = 3.0
    # A reference decay near 1 cannot track the fast energy decay of the
    # early descent and leaves the gate blind to the first burst events.
    beta_e: float = 0.9
    # Clip EMA decay: fast enough that the clip releases between burst
    # events instead of staying chronically engaged.
    beta_c: float = 0.7
    # Trigger threshold above the natural max/median column-energy spread
    # (about 3-17 at stationarity), so only genuine anomalies clip.
    trigger: Optional[float] = 20.0  # None disables triggering
    gate_period: int = 10
    warmup: int = 50
    # Moderate long-horizon weight; heavier mixing dilutes the clip's
    # instantaneous response to column anomalies.
    rho: float = 0.25
    gamma: Optional[float] = None  # effective step weight; defaults to eta
    ns_coeffs: tuple = DEFAULT_NS_COEFFS
    # Muon baseline only: scale the direction by sqrt(max(1, d_out/d_in)).
    muon_shape_scale: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        for name in ("beta1", "beta2", "beta_e", "beta_c"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0.0 < self.c_min <= 1.0:
            raise ValueError("c_min must be in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.t_ns < 1:
            raise ValueError("t_ns must be >= 1")
        if self.gate_period < 1:
            raise ValueError("gate_period must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def effective_gamma(self) -> float:
        return self.eta if self.gamma is None else self.gamma


def noclip(hyper: TrasMuonHyper) -> TrasMuonHyper:
    """Disable the feature-wise clip and the long-horizon mixing; what
    remains is the NorMuon backbone (orthogonalized momentum + row scaling
    + RMS calibration)."""
    return dataclasses.replace(hyper, alpha=0.0, trigger=None, rho=0.0)


@dataclass
class ParamState:
    """Per-matrix optimizer state for the Muon family."""

    m: np.ndarray
    v_row: np.ndarray
    e_ref: float = 0.0
    c_ema: np.ndarray = None
    c_last: np.ndarray = None
    s_acc: float = 0.0
    c_acc: np.ndarray = None
    step: int = 0
    # AdamW elementwise second moment; unused by the Muon family.
    v: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "ParamState":
        rows, cols = shape
        return cls(
            m=np.zeros(shape),
            v_row=np.zeros(rows),
            e_ref=0.0,
            c_ema=np.ones(cols),
            c_last=np.ones(cols),
            s_acc=0.0,
            c_acc=np.zeros(cols),
            step=0,
            v=np.zeros(shape),
        )


@dataclass
class GateOutput:
    """Applied clip plus the closed-loop observables logged per step."""

    c_used: np.ndarray
    r_max: float
    r_q95: float
    r_median: float
    triggered_count: int


@dataclass
class StepResult:
    """Per-step observables returned by every optimizer step."""

    delta_norm: float
    r_max: float = 0.0
    r_q95: float = 0.0
    r_median: float = 0.0
    c_used_min: float = 1.0
    triggered_count: int = 0
    burst: bool = False
    degenerate: bool = False


def _check_grad(w: np.ndarray, g: np.ndarray, state: ParamState, name: str = "param"):
    if g.shape != w.shape or g.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch for {name}: w {w.shape}, g {g.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(g)):
        raise ValueError(f"non-finite gradient entries for parameter {name!r}")


def momentum_update(state: ParamState, g: np.ndarray, beta1: float) -> ParamState:
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {g.shape} != momentum shape {state.m.shape}")
    state.m = beta1 * state.m + (1.0 - beta1) * g
    return state


def orthogonalized_direction(
    m: np.ndarray, t_ns: int, eps: float, coeffs: tuple = DEFAULT_NS_COEFFS
) -> tuple[np.ndarray, bool]:
    """Normalize-then-orthogonalize; a momentum with Frobenius norm <= eps
    has no usable direction and is flagged degenerate."""
    return newton_schulz_polar(m, steps=t_ns, eps=eps, coeffs=coeffs)


def row_scale(
    o: np.ndarray, state: ParamState, beta2: float, eps: float
) -> np.ndarray:
    """Row-wise second-moment scaling; updates state.v_row in place."""
    state.v_row = beta2 * state.v_row + (1.0 - beta2) * np.mean(o * o, axis=1)
    return o / np.sqrt(state.v_row + eps)[:, np.newaxis]


def calibrated_step_size(o_base: np.ndarray, eta: float, eps: float) -> float:
    rows, cols = o_base.shape
    return eta * math.sqrt(rows * cols) / (float(np.linalg.norm(o_base)) + eps)


def update_energy_reference(
    state: ParamState, energies: np.ndarray, beta_e: float
) -> ParamState:
    """Median-of-energies EMA. The reference is assigned directly on the
    first update (a pure EMA from the zero init would over-clip early);
    warmup keeps the gate inert while the cold-start bias washes out."""
    if np.asarray(energies).size == 0:
        raise ValueError("energies must be non-empty")
    e_cur = quantile(energies, 0.5)
    if state.e_ref == 0.0:
        state.e_ref = e_cur
    else:
        state.e_ref = beta_e * state.e_ref + (1.0 - beta_e) * e_cur
    return state


def compute_gate(
    energies: np.ndarray, e_ref: float, hyper: TrasMuonHyper
) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous clip from relative column energies.

    Returns ``(c_inst, r)``; ``c_inst`` is elementwise in [c_min, 1].
    """
    if e_ref < 0:
        raise ValueError("energy reference must be >= 0")
    r = np.asarray(energies, dtype=np.float64) / (e_ref + hyper.eps)
    c_raw = 1.0 / (1.0 + hyper.alpha * np.log1p(r))
    c_clip = np.clip(c_raw, hyper.c_min, 1.0)
    if hyper.trigger is not None:
        c_inst = np.where(r > hyper.trigger, c_clip, 1.0)
    else:
        c_inst = c_clip
    return c_inst, r


def schedule_free_mix(
    state: ParamState, t: int, hyper: TrasMuonHyper
) -> np.ndarray:
    """Advance the effective-time accumulators and mix the short-horizon EMA
    with the long-horizon average. During warmup the applied clip is all
    ones. Updates state.s_acc / state.c_acc / state.c_last in place."""
    gamma = hyper.effective_gamma
    state.s_acc += gamma * gamma
    state.c_acc = state.c_acc + (gamma * gamma) * state.c_last
    if t <= hyper.warmup:
        c_used = np.ones_like(state.c_last)
    else:
        c_avg = state.c_acc / (state.s_acc + hyper.eps)
        c_used = np.clip((1.0 - hyper.rho) * state.c_ema + hyper.rho * c_avg,
                         hyper.c_min, 1.0)
    state.c_last = c_used
    return c_used


def trasmuon_step(
    w: np.ndarray,
    g: np.ndarray,
    state: ParamState,
    hyper: TrasMuonHyper,
    momentum_transform: Optional[MomentumTransform] = None,
    param_name: str = "param",
) -> tuple[np.ndarray, ParamState, StepResult]:
    """One TrasMuon step. Mutates ``state`` and returns the new parameter.

    ``momentum_transform``, if given, intercepts the momentum right after its
    EMA update (the stress harness injects column bursts there); both the
    direction and the column energies see the transformed momentum.
    """
    _check_grad(w, g, state, param_name)
    t = state.step + 1
    eta = hyper.eta
    rows, cols = w.shape

    if hyper.weight_decay > 0.0:
        w = (1.0 - eta * hyper.weight_decay) * w

    momentum_update(state, g, hyper.beta1)
    burst = False
    m_used = state.m
    if momentum_transform is not None:
        m_used, burst, persist = momentum_transform(state.m, t)
        if persist:
            state.m = m_used

    o, degenerate = orthogonalized_direction(m_used, hyper.t_ns, hyper.eps,
                                             hyper.ns_coeffs)
    if degenerate:
        state.step = t
        return w, state, StepResult(delta_norm=0.0, burst=burst, degenerate=True)

    o_base = row_scale(o, state, hyper.beta2, hyper.eps)
    eta_hat = calibrated_step_size(o_base, eta, hyper.eps)

    energies = column_energies(m_used)
    update_energy_reference(state, energies, hyper.beta_e)

    r = energies / (state.e_ref + hyper.eps)
    triggered = 0
    if t > hyper.warmup and t % hyper.gate_period == 0:
        c_inst, r = compute_gate(energies, state.e_ref, hyper)
        if hyper.trigger is not None:
            triggered = int(np.count_nonzero(r > hyper.trigger))
        state.c_ema = hyper.beta_c * state.c_ema + (1.0 - hyper.beta_c) * c_inst

    c_used = schedule_free_mix(state, t, hyper)

    delta = (-eta_hat) * (o_base * c_used[np.newaxis, :])
    delta_norm = float(np.linalg.norm(delta))
    assert delta_norm <= eta * math.sqrt(rows * cols), "update norm bound violated"
    w = w + delta
    state.step = t
    return w, state, StepResult(
        delta_norm=delta_norm,
        r_max=float(r.max()),
        r_q95=quantile(r, 0.95),
        r_median=quantile(r, 0.5),
        c_used_min=float(c_used.min()),
        triggered_count=triggered,
        burst=burst,
    )


def normuon_step(
    w: np.ndarray,
    g: np.ndarray,
    state: ParamState,
    hyper: TrasMuonHyper,
    momentum_transform: Optional[MomentumTransform] = None,
    param_name: str = "param",
) -> tuple[np.ndarray, ParamState, StepResult]:
    """TrasMuon with the clip forced inert: shared code path, so the noClip
    ablation identity holds bit-for-bit."""
    return trasmuon_step(w, g, state, noclip(hyper), momentum_transform, param_name)


def muon_step(
    w: np.ndarray,
    g: np.ndarray,
    state: ParamState,
    hyper: TrasMuonHyper,
    momentum_transform: Optional[MomentumTransform] = None,
    param_name: str = "param",
) -> tuple[np.ndarray, ParamState, StepResult]:
    """Plain orthogonalized momentum with a fixed shape-aware scale; no row
    scaling, calibration, or clip."""
    _check_grad(w, g, state, param_name)
    t = state.step + 1
    rows, cols = w.shape
    if hyper.weight_decay > 0.0:
        w = (1.0 - hyper.eta * hyper.weight_decay) * w
    momentum_update(state, g, hyper.beta1)
    burst = False
    m_used = state.m
    if momentum_transform is not None:
        m_used, burst, persist = momentum_transform(state.m, t)
        if persist:
            state.m = m_used
    o, degenerate = orthogonalized_direction(m_used, hyper.t_ns, hyper.eps,
                                             hyper.ns_coeffs)
    state.step = t
    if degenerate:
        return w, state, StepResult(delta_norm=0.0, burst=burst, degenerate=True)
    scale = math.sqrt(max(1.0, rows / cols)) if hyper.muon_shape_scale else 1.0
    delta = (-hyper.eta * scale) * o
    w = w + delta
    return w, state, StepResult(delta_norm=float(np.linalg.norm(delta)), burst=burst)


def adamw_step(
    w: np.ndarray,
    g: np.ndarray,
    state: ParamState,
    hyper: TrasMuonHyper,
    momentum_transform: Optional[MomentumTransform] = None,
    param_name: str = "param",
) -> tuple[np.ndarray, ParamState, StepResult]:
    """Decoupled-weight-decay Adam with bias correction. ``hyper.beta1`` and
    ``hyper.beta2`` are interpreted as Adam's moment decays."""
    _check_grad(w, g, state, param_name)
    t = state.step + 1
    if hyper.weight_decay > 0.0:
        w = (1.0 - hyper.eta * hyper.weight_decay) * w
    state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * g
    burst = False
    m_used = state.m
    if momentum_transform is not None:
        m_used, burst, persist = momentum_transform(state.m, t)
        if persist:
            state.m = m_used
    state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * (g * g)
    m_hat = m_used / (1.0 - hyper.beta1 ** t)
    v_hat = state.v / (1.0 - hyper.beta2 ** t)
    delta = (-hyper.eta) * m_hat / (np.sqrt(v_hat) + hyper.eps)
    w = w + delta
    state.step = t
    return w, state, StepResult(delta_norm=float(np.linalg.norm(delta)), burst=burst)


STEP_FUNCTIONS = {
    "trasmuon": trasmuon_step,
    "normuon": normuon_step,
    "muon": muon_step,
    "adamw": adamw_step,
}


# ---------------------------------------------------------------------------
# State snapshots
# ---------------------------------------------------------------------------

def _array_to_jsonable(a: Optional[np.ndarray]):
    if a is None:
        return None
    # json emits shortest round-trip decimals for Python floats, so float64
    # values survive a snapshot/restore cycle exactly.
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _array_from_jsonable(obj) -> Optional[np.ndarray]:
    if obj is None:
        return None
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def snapshot_states(hyper: TrasMuonHyper, states: dict[str, ParamState]) -> str:
    """Self-describing JSON snapshot of hyperparameters and every per-param
    state field; exact round trip for float64 values."""
    hyper_dict = dataclasses.asdict(hyper)
    hyper_dict["ns_coeffs"] = [list(c) for c in hyper.ns_coeffs]
    payload = {
        "format": "trasmuon-state",
        "version": 1,
        "hyper": hyper_dict,
        "states": {
            name: {
                "m": _array_to_jsonable(s.m),
                "v_row": _array_to_jsonable(s.v_row),
                "e_ref": s.e_ref,
                "c_ema": _array_to_jsonable(s.c_ema),
                "c_last": _array_to_jsonable(s.c_last),
                "s_acc": s.s_acc,
                "c_acc": _array_to_jsonable(s.c_acc),
                "step": s.step,
                "v": _array_to_jsonable(s.v),
            }
            for name, s in states.items()
        },
    }
    return json.dumps(payload, sort_keys=True)


def restore_states(text: str) -> tuple[TrasMuonHyper, dict[str, ParamState]]:
    payload = json.loads(text)
    if payload.get("format") != "trasmuon-state":
        raise ValueError("not a trasmuon state snapshot")
    hyper_dict = dict(payload["hyper"])
    hyper_dict["ns_coeffs"] = tuple(tuple(c) for c in hyper_dict["ns_coeffs"])
    hyper = TrasMuonHyper(**hyper_dict)
    states = {}
    for name, s in payload["states"].items():
        states[name] = ParamState(
            m=_array_from_jsonable(s["m"]),
            v_row=_array_from_jsonable(s["v_row"]),
            e_ref=s["e_ref"],
            c_ema=_array_from_jsonable(s["c_ema"]),
            c_last=_array_from_jsonable(s["c_last"]),
            s_acc=s["s_acc"],
            c_acc=_array_from_jsonable(s["c_acc"]),
            step=s["step"],
            v=_array_from_jsonable(s["v"]),
        )
    return hyper, states
