"""
Shared fixtures: the default game, tiny operator ensembles and output directories.
"""
import os
import sys

import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from pno_game.checks import small_ensemble  # noqa: E402
from pno_game.game.intersection import IntersectionGame  # noqa: E402
from pno_game.models.autodiff_net import ActivationKind  # noqa: E402
from pno_game.models.operator import LatticeSpec, Normalizer, OperatorEnsemble  # noqa: E402


@pytest.fixture
def game():
    return IntersectionGame()


@pytest.fixture
def ensemble(game):
    """Untrained ensemble with costate nets: hidden (8, 8), q = 4, 5x5 lattice."""
    return small_ensemble(game, seed=3)


@pytest.fixture
def value_only_ensemble(game):
    lattice = LatticeSpec(resolution=(5, 5))
    normalizer = Normalizer.from_box(lattice.d_bounds, lattice.v_bounds, game.horizon, 100.0, 10.0)
    return OperatorEnsemble.initialize(
        game, lattice, normalizer, (8,), 4, ActivationKind("tanh"), seed=5, with_costate=False
    )


@pytest.fixture
def output_dir(tmp_path):
    path = tmp_path / "runs"
    path.mkdir()
    return path
