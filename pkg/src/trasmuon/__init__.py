"""TrasMuon: trust-region adaptive scaling for orthogonalized momentum
optimizers, with baselines and a burst-injection stress benchmark."""

__version__ = "0.1.0"

from .linalg import (
    DEFAULT_NS_COEFFS,
    column_energies,
    conditioned_spd,
    frobenius_norm,
    newton_schulz_polar,
    quantile,
    random_orthogonal,
)
from .metrics import AggregateSummary, RunSummary, SpikeRule, aggregate, detect_spikes, summarize_run
from .optim import (
    GateOutput,
    ParamState,
    StepResult,
    TrasMuonHyper,
    adamw_step,
    muon_step,
    normuon_step,
    restore_states,
    snapshot_states,
    trasmuon_step,
)
from .stress import (
    BurstConfig,
    QuadraticProblem,
    StepDiagnostics,
    Trajectory,
    build_problem,
    inject_gradient_burst,
    inject_momentum_burst,
    quadratic_grad,
    quadratic_loss,
    run_stress,
)
