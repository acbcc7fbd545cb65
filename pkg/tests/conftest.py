import itertools
from dataclasses import dataclass

import numpy as np
import pytest

from imflab.imf import ImfConfig, run_imf
from imflab.oracle import solve_bridge
from imflab.process import (
    GeneratorSpec,
    bridge_conditional,
    build_markov_joint,
    init_p0,
    random_instance,
)
from imflab.tensor import JointDistribution
from imflab.theory import compute_constants

GEOMETRIES = [(2, 1), (2, 2), (3, 1), (3, 2)]


@dataclass
class Pipeline:
    instance: object
    q: object
    bridge: object
    constants: object
    opt: object
    p0: object
    oracle: object

    def run(self, iterations=100, **kw):
        cfg = ImfConfig(max_iterations=iterations, **{"stop_kl": 0.0, **kw})
        return run_imf(self.p0, self.bridge, self.opt, cfg, self.constants, self.instance.marginals)


def make_pipeline(cardinality, interior_count, seed, **gen):
    inst = random_instance(GeneratorSpec(cardinality, interior_count, seed, **gen))
    q = build_markov_joint(inst.spec)
    bridge = bridge_conditional(q)
    sol = solve_bridge(q, inst.marginals, bridge=bridge)
    return Pipeline(
        inst, q, bridge, compute_constants(bridge, inst.marginals), sol.lifted,
        init_p0(bridge, inst.coupling, inst.marginals), sol,
    )


def sweep_instances(count=50):
    """Seeds 0..count-1 cycling through the four desk-scale geometries."""
    return [(*GEOMETRIES[i % len(GEOMETRIES)], i) for i in range(count)]


def random_joint(rng, k, n):
    v = rng.random((k,) * (n + 2)) + 0.05
    return JointDistribution.from_array(v / v.sum())


def all_trajectories(k, n):
    return itertools.product(range(k), repeat=n + 2)


@pytest.fixture
def pipeline42():
    return make_pipeline(2, 1, 42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import CRITERIA
    except ImportError:
        return
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
