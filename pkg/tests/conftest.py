import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparsemesh.blocks import BlockMask, BlockShape, compress
from sparsemesh.fixtures import fixture_graph
from sparsemesh.pipeline import hw_from


@pytest.fixture(scope="session")
def smallcnn():
    return fixture_graph("smallcnn")


@pytest.fixture(scope="session")
def vgg():
    return fixture_graph("vgg16")


@pytest.fixture(scope="session")
def vgg_front():
    return fixture_graph("vgg16_front")


@pytest.fixture
def hw44():
    return hw_from(None, mesh=(4, 4))


def random_mask(rng, rows, cols, density=0.5, shape=None):
    shape = shape or BlockShape(8, 8)
    bits = (rng.rand(rows, cols) < density).astype(np.uint8)
    return BlockMask(bits, shape)


def checkerboard_mask(rows, cols, shape=None):
    """Exactly half the blocks zero in every row (rows with even cols)."""
    shape = shape or BlockShape(8, 8)
    bits = np.indices((rows, cols)).sum(axis=0) % 2
    return BlockMask(bits.astype(np.uint8), shape)


def random_coo(rng, out_ch, in_ch, kernel=(1, 1), density=0.5, shape=None, lo=-8, hi=8):
    shape = shape or BlockShape(8, 8)
    rows = -(-out_ch // shape.b_o)
    cols = -(-in_ch // shape.b_i)
    mask = random_mask(rng, rows, cols, density, shape)
    w = rng.randint(lo, hi, size=(out_ch, kernel[0], kernel[1], in_ch)).astype(np.int8)
    return w, mask, compress(w, mask)
