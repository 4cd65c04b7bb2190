"""Material-loss extraction from multi-mode superconducting resonators.

The internal loss rate of each mode is a linear combination of three
material loss factors (surface resistance, scaled surface-oxide loss
tangent, seam resistance per unit length) weighted by the mode's
participation factors. Measuring several modes with different
participations and inverting the system resolves the individual factors,
or bounds them where the measurement is not sensitive enough.
"""

__version__ = "0.1.0"

from .errors import (
    ConvergenceError,
    FitFailure,
    MonteCarloError,
    NoCrossingError,
    ResolveQError,
    SolverError,
    UnitTagError,
    UnsolvableSystemError,
    ValidationError,
)
from .loss_model import (
    CHANNELS,
    LossBudget,
    MaterialLossVector,
    ModeMeasurement,
    OxideAssumptions,
    ParticipationMatrix,
    ParticipationRow,
    forward_loss_rates,
    loss_budget,
    predict_quality_factors,
    scale_loss_tangent,
    unscale_loss_tangent,
)
from .nnls import kkt_violation, lawson_hanson, lawson_hanson_batch
from .extraction import (
    Classification,
    ExtractionConfig,
    ExtractionResult,
    classify_and_bound,
    monte_carlo_extract,
    nnls_solve,
    power_sweep_extract,
    sample_loss_factors,
    weighted_lsq_solve,
)
from .sensitivity import (
    SensitivityGrid,
    SensitivityGridSpec,
    minimum_resolvable,
    relative_uncertainty_at,
    sensitivity_grid,
)
from .spectral_fit import (
    FitFlag,
    ReflectionTrace,
    ResonanceFit,
    circle_fit_resonance,
    fit_to_measurement,
    synthesize_reflection,
)
from .dataio import (
    DeviceRecord,
    GapFrequencyTable,
    builtin_fixtures,
    builtin_participation,
    infer_gap,
    load_device,
    save_device,
)
