"""
Shared fixtures and hypothesis strategies for the test suite.
"""
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from src.engine import ModelParams, OpinionState

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

EIGHT_AGENT_BOUNDS = (0.5, 0.41, 0.35, 0.24, 0.175, 0.165, 0.12, 0.047)


@pytest.fixture
def chain_params():
    return ModelParams.build(0.5, (0.4, 0.3, 0.2))


@pytest.fixture
def chain_state():
    return OpinionState.of((0.06, 0.14, 0.5))


@pytest.fixture
def reference_params():
    """n=3, all bounds 0.5, mu=0.5: T=16 and c = 1 - 3^-16."""
    return ModelParams.build(0.5, (0.5, 0.5, 0.5))


@pytest.fixture
def eight_agent_params():
    return ModelParams.build(0.5, EIGHT_AGENT_BOUNDS)


unit_interval = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
positive_bound = st.floats(min_value=0.01, max_value=1.2, allow_nan=False)
lattice_value = st.integers(min_value=0, max_value=10).map(lambda k: k / 10)


@st.composite
def model_instances(draw, min_n=3, max_n=8, mus=None):
    """
    Random (params, state) pair with n in [min_n, max_n].
    """
    n = draw(st.integers(min_value=min_n, max_value=max_n))
    mu = draw(st.sampled_from(mus)) if mus else draw(st.floats(min_value=0.05, max_value=0.95))
    bounds = draw(st.lists(positive_bound, min_size=n, max_size=n))
    x = draw(st.lists(unit_interval, min_size=n, max_size=n))
    return ModelParams.build(mu, bounds), OpinionState.of(x)
