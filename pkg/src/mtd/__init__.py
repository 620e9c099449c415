"""Signal estimation from a long noisy record holding unlocated copies of the signal."""

from .aa import AaConfig, EstimateReport, estimate_aa
from .baselines import deconv_estimate, known_support_estimate, oracle_distances
from .core import (DensityParams, Measurement, PairSeparationFunction, SupportSequence,
                   default_signal, generate_support_from_psf, generate_support_rejection,
                   pair_separation, rmse, synthesize)
from .em import EmConfig, EmPriors, estimate_em
from .errors import DataError, MtdError, NumericalError, PlacementError
from .moments import MomentStats, forward_asd, forward_ws, measurement_moments

__version__ = "0.1.0"
