import numpy as np
import pytest

from quantagg.grid import GridError, QuantileGrid


def test_even_grid_99():
    g = QuantileGrid.even(99)
    assert g.m == 99
    assert g.levels[0] == pytest.approx(0.01)
    assert g.has_median and g.levels[g.median_index] == 0.5
    assert g.alphas[0] == pytest.approx(0.02)
    assert len(g.alphas) == 49


def test_alphas_and_indices():
    g = QuantileGrid([0.05, 0.1, 0.9, 0.95])
    assert not g.has_median
    assert np.allclose(g.alphas, [0.1, 0.2])
    assert g.alpha_indices(0.2) == (1, 2)
    assert g.anchor_index == 2


@pytest.mark.parametrize(
    "levels", [[0.2, 0.1], [0.0, 1.0], [0.1, 0.8], [], [0.3, 0.3, 0.7]]
)
def test_invalid_grids(levels):
    with pytest.raises(GridError):
        QuantileGrid(levels)


def test_parse():
    assert QuantileGrid.parse("9") == QuantileGrid.even(9)
    assert QuantileGrid.parse("0.1,0.5,0.9").m == 3
