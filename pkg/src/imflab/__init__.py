"""Exact Iterative Markovian Fitting on finite-state, discrete-time Schrodinger bridges."""

__version__ = "0.1.0"

from .imf import ImfConfig, IterationTrace, markov_projection, reciprocal_projection, run_imf
from .oracle import SinkhornConfig, brute_force_opt, lift_static, solve_bridge, solve_static
from .process import (
    BridgeConditional,
    Coupling,
    GeneratorSpec,
    MarginalPair,
    MarkovSpec,
    bridge_conditional,
    build_markov_joint,
    independent_coupling,
    init_p0,
    random_instance,
)
from .tensor import JointDistribution, SignedMeasure, StateSpace, kl_divergence, marginal
from .theory import RateConstants, SubspaceId, compute_constants
