"""Sparsity-constrained wide-area damping control learned from measurements."""

from .errors import (
    ConvergenceError,
    DivergenceError,
    IllConditionedError,
    InvalidParameterError,
    ModelParseError,
    ModelValidationError,
    NotHurwitzError,
    SparseWacError,
    UnstabilizableError,
)
from .lqr import (
    CostWeights,
    Kernel,
    evaluate_cost,
    evaluate_cost_finite,
    lqr_gain,
    nominal_kernel,
    solve_care,
    solve_lyapunov,
    spectral_abscissa,
)
from .model import (
    BlockStructure,
    GeneratorSpec,
    SmallSignalModel,
    build_swing_model,
    card_off,
    comm_graph,
    default_benchmark,
    load_model,
    save_model,
    single_block,
)
from .qlearn import (
    Actor,
    CriticState,
    ExplorationNoise,
    LearnerConfig,
    LearnLog,
    LearnResult,
    TransitionWindow,
    actor_error,
    actor_gradient,
    basis,
    critic_error,
    critic_update,
    default_noise,
    exploration_input,
    grasp_step,
    learn,
    prune_gain,
    unvech,
    vech,
)
from .sim import Disturbance, Plant, Trajectory, plant_interface, run_closed_loop, step_window
from .uncertainty import UncertaintySpec, default_support, perturb_model

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
