import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# must be set before app.config is imported
_LEDGER_DIR = tempfile.mkdtemp(prefix="hstack-tests-")
os.environ["HSTACK_DATABASE_URL"] = f"sqlite:///{Path(_LEDGER_DIR) / 'runs.db'}"
os.environ.setdefault("HSTACK_THREADS", "1")

import math

import numpy as np
import pytest

from app.schemas import SamplerConfig
from app.services.core import FeatureSet, LpdMatrix

FAVOR_FIRST = (0.0, math.log(0.01))
FAVOR_SECOND = (math.log(0.01), 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def quick_sampler():
    return SamplerConfig(chains=2, warmup=300, draws_per_chain=400, max_leapfrog=16, seed=11)


def two_point_rows(first: int, second: int) -> np.ndarray:
    return np.array([FAVOR_FIRST] * first + [FAVOR_SECOND] * second)


@pytest.fixture
def three_cell_counts():
    """Cells A and B share the same 80/20 split; B has 40 times less data. Cell C leans the other way."""
    blocks = [(160, 40), (4, 1), (40, 160)]
    values = np.vstack([two_point_rows(a, b) for a, b in blocks])
    cells = np.concatenate([np.full(a + b, j) for j, (a, b) in enumerate(blocks)])
    return LpdMatrix(values=values), FeatureSet(cell_index=cells, cell_labels=("A", "B", "C"))
