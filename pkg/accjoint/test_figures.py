import numpy as np
import pytest

from analysis import summarize_sigma_draws
from conftest import constant_chain
from errors import InvalidInputError
from figures import band_color, band_of, block_pair, emit_heatmap, emit_recovery_plot, heatmap_cells, write_svg
from simstudy import desk_generator, score_recovery


@pytest.fixture
def summary():
    sigma = np.array([
        [1.0, 0.9, -0.5, 0.05],
        [0.9, 1.0, -0.3, 0.2],
        [-0.5, -0.3, 1.0, 0.1],
        [0.05, 0.2, 0.1, 1.0],
    ])
    other = sigma.copy()
    other[0, 3] = other[3, 0] = -0.05  # mean 0, sd .05 at (o.b, i.v)
    return summarize_sigma_draws(np.stack([sigma, other]), ["o.b", "o.v", "i.b", "i.v"], ["out", "out", "in", "in"])


def test_bands():
    assert band_of(0.0) == 0
    assert band_of(0.5) == 4
    assert band_of(-0.97) == -8
    assert band_of(1.0) == 8


def test_band_colors():
    assert band_color(0) == "#ffffff"
    assert band_color(8) == "#008c00"
    assert band_color(-8) == "#cc0000"
    assert band_color(4) == "#80c680"


def test_heatmap_cells_full(summary):
    cells = heatmap_cells(summary)
    assert len(cells) == 16
    diagonal = [c for c in cells if c.row == c.col]
    assert all(c.band == 8 and c.border for c in diagonal)
    cell = next(c for c in cells if (c.row_label, c.col_label) == ("o.b", "i.b"))
    assert cell.band == -4 and cell.border


def test_heatmap_cells_between_blocks(summary):
    cells = heatmap_cells(summary, ("in", "out"))
    assert len(cells) == 4
    assert [c.row_label for c in cells] == ["i.b", "i.b", "i.v", "i.v"]
    assert [c.col_label for c in cells] == ["o.b", "o.v", "o.b", "o.v"]
    zero = next(c for c in cells if (c.row_label, c.col_label) == ("i.v", "o.b"))
    assert zero.fill == "#ffffff" and not zero.border


def test_heatmap_unknown_block(summary):
    with pytest.raises(InvalidInputError):
        heatmap_cells(summary, ("in", "elsewhere"))


def test_heatmap_svg_is_byte_stable(summary, tmp_path):
    first = emit_heatmap(summary, ("in", "out"))
    second = emit_heatmap(summary, ("in", "out"))
    assert first == second
    assert first.lstrip().startswith("<?xml")
    write_svg(first, tmp_path / "heatmap.svg")
    assert (tmp_path / "heatmap.svg").read_text() == first


def test_recovery_plot(desk_spec):
    gen = desk_generator(desk_spec)
    report = score_recovery(constant_chain(desk_spec, gen.sigma), gen)
    svg = emit_recovery_plot(report, title="matched")
    assert "<svg" in svg
    assert svg == emit_recovery_plot(report, title="matched")


def test_block_pair():
    assert block_pair(["out", "out", "in", "in"]) == ("in", "out")
    assert block_pair(["a", "b", "c"]) is None
    assert block_pair(["a"]) is None
