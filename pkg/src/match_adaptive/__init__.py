"""Match-adaptive randomization inference for optimal pair matches on a propensity score."""
from .core import MatchedDesign, Sample, Unit, ValidationError, jitter_ties, read_sample_csv
from .inference import TestSpec, confidence_interval, diff_in_means, randomization_test
from .matcher import MatchProblem, match, optimal_pair_match, optimal_pair_match_caliper
from .oracle import brute_force_support, compare_with_permuter
from .permuter import build_distribution
from .propensity import fit_logistic, pair_probabilities, predict
from .structure import analyze

__all__ = [
    "MatchProblem",
    "MatchedDesign",
    "Sample",
    "TestSpec",
    "Unit",
    "ValidationError",
    "analyze",
    "brute_force_support",
    "build_distribution",
    "compare_with_permuter",
    "confidence_interval",
    "diff_in_means",
    "fit_logistic",
    "jitter_ties",
    "match",
    "optimal_pair_match",
    "optimal_pair_match_caliper",
    "pair_probabilities",
    "predict",
    "randomization_test",
    "read_sample_csv",
]
