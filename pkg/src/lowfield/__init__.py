"""Simulation and reconstruction toolkit for low-field MRI with a built-in nonlinear readout gradient."""

__version__ = "0.1.0"

from .constants import DEFAULT_CONSTANTS, REMANENCE, PhysicsConstants
from .fieldmap import (
    Dipole,
    FieldMap,
    Grid3,
    LinearFieldFit,
    LinearFit,
    Sphere,
    deformation_map,
    dipole_field,
    error_map,
    linear_fit,
    synthesize_field,
)
from .magnet_opt import (
    Chromosome,
    FitnessReport,
    FitnessTargets,
    GAParams,
    HalbachGA,
    HalbachGeometry,
    ShimLayout,
    ShimOptimizer,
    evaluate_fitness,
    run_ga,
    solve_shims,
)
from .rf_sim import (
    PulseWaveform,
    SpinState,
    excitation_profile,
    make_hard,
    make_wurst,
    propagate,
    refocusing_profile,
    simulate_echo_train,
)
from .sequence import AcquisitionProtocol, PhaseEncodeTable, build_protocol, estimate_resolution
from .encode import EncodingOperator, Phantom, SignalData, add_noise, make_phantom, partition_y
from .recon import (
    FFTReconstructor,
    Image,
    ModelBasedReconstructor,
    Preconditioner,
    build_preconditioner,
    cg_solve,
    compute_snr,
    fft_recon,
    intensity_correct,
)
