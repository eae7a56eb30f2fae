"""Interview design for cold-start recommendation."""
from .linalg import objective_f
from .pmf import PMF, FactorModel
from .selection import ALGORITHMS, CandidatePool, InterviewSelector, select

__all__ = ["ALGORITHMS", "CandidatePool", "FactorModel", "InterviewSelector", "PMF", "objective_f", "select"]
__version__ = "0.1.0"
