"""Delay-adaptive step-sizes for asynchronous proximal gradient methods.

Simulators and threaded backends for PIAG (parameter server) and Async-BCD
(shared memory), step-size policies that adapt to measured delays, and
verifiers for the Lyapunov-sequence conditions behind their convergence.
"""

from .analysis import (
    LyapunovBundle,
    VerifyReport,
    bundle_from_bcd,
    bundle_from_piag,
    check_integral_bound,
    prox_grad_mapping,
    verify_sequence,
)
from .bcd_sim import bcd_run, bcd_step
from .dataio import (
    Dataset,
    RunTrace,
    parse_libsvm,
    partition_batches,
    read_trace_csv,
    synth_logreg,
    write_libsvm,
    write_trace_csv,
)
from .delay import DelayModel, parse_delay_spec
from .errors import (
    CapacityError,
    ConfigError,
    DelayAdaptError,
    DelayError,
    DimensionError,
    LabelError,
    ParseError,
    SequenceError,
    WorkerError,
)
from .numkit import (
    LogisticProblem,
    QuadraticProblem,
    prox_l1,
    quadratic_problem,
    random_quadratic,
    reference_solution,
)
from .piag_sim import piag_run, piag_step
from .runtime import EventLog, run_parameter_server, run_shared_memory
from .stepsize import GammaHistory, PolicyConfig, make_policy, next_step_size

__version__ = "0.1.0"
