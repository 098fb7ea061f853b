import sys
from pathlib import Path

import numpy as np
import pytest

from roomdet.tensor import TAPE, Tensor

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def clean_tape():
    TAPE.clear()
    yield
    TAPE.clear()


def rand_t(shape, seed=0, scale=1.0, requires_grad=True, dtype=np.float64):
    """Seeded uniform tensor in (-scale, scale), float64 by default so the
    same helper feeds finite-difference checks."""
    rng = np.random.default_rng(seed)
    data = rng.uniform(-scale, scale, size=shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def tie_free(shape, seed=0, dtype=np.float64):
    """Permuted linspace: all entries distinct, so max-pool picks are unique
    and finite differences stay clean."""
    rng = np.random.default_rng(seed)
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, n)
    return Tensor(rng.permutation(vals).reshape(shape).astype(dtype), requires_grad=True)
