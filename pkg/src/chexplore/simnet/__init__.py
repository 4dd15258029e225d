from .loop import (
    ExplorationConfig,
    ExploreEvent,
    MetricsRow,
    RunResult,
    Trainer,
    convergence_probe,
    make_streams,
    run_baseline,
    run_chex,
)
from .network import (
    FlopsReport,
    OptimizerState,
    SimNetwork,
    backward,
    count_flops,
    forward,
    loss,
    sgd_step_masked,
)
