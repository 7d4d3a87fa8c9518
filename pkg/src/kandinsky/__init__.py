"""Conformal prediction with coverage over overlapping and fractional groups.

Thresholds are fitted by exact pinball-loss regression over the span of a
group basis; see :mod:`kandinsky.methods` for the procedures.
"""

from .core import (
    REGRESSION,
    BasisMatrix,
    Dataset,
    LabeledExample,
    PredictionSet,
    QuantileModel,
    Task,
    classification,
    empirical_quantile,
    read_csv,
    validate_dataset,
    write_csv,
)
from .errors import (
    DegenerateInterpolationError,
    FormatError,
    InvariantError,
    KandinskyError,
    SolverError,
    UnboundedError,
    ValidationError,
)
from .groups import (
    EstimatorSpec,
    Group,
    GroupSpec,
    Predicate,
    build_indicator_basis,
    eval_basis,
    fit_basis,
    fit_fractional_basis,
)
from .methods import (
    CalibratedPredictor,
    calibrate,
    class_conditional_calibrate,
    conservative_calibrate,
    kandinsky_calibrate,
    kandinsky_predict_classification,
    kandinsky_predict_regression,
    mondrian_calibrate,
    predict_sets,
    split_calibrate,
    testtime_qr_predict,
)
from .pinball import QrSolution, check_optimality, fit_linear_quantile, pinball_loss
from .scores import ScoreSpec, abs_residual, aps_score, cqr_score, jittered, parse_score

__version__ = "0.1.0"
