import re
from pathlib import Path

import pytest

from bandprobe.bands import BandSet
from bandprobe.permutation import ImportanceScore
from bandprobe.report import render_bar_chart

GOLDEN = Path(__file__).parent / "golden" / "importance.svg"


def scores(drops, labels=None):
    labels = labels or [f"b{i}" for i in range(len(drops))]
    return [ImportanceScore(BandSet(lab, ("NIR",)), 0.9, [0.9], d) for lab, d in zip(labels, drops)]


def golden_scores():
    return scores([12.5, 0.0, 3.25, -1.0, 0.5], ["NIR", "Blue", "NDWI", "SWIR2", "Red & <x>"])


def bars(svg):
    out = []
    for m in re.finditer(r'<rect class="bar" data-label="([^"]*)" x="[^"]*" y="([^"]*)" '
                         r'width="[^"]*" height="([^"]*)"', svg):
        out.append((m.group(1), float(m.group(2)), float(m.group(3))))
    return out


def axis_y(svg):
    return float(re.search(r'<line x1="\d+" y1="([^"]*)"', svg).group(1))


def test_matches_golden_file():
    assert render_bar_chart(golden_scores()) == GOLDEN.read_text()


def test_is_deterministic():
    assert render_bar_chart(golden_scores()) == render_bar_chart(golden_scores())


def test_one_bar_per_score_in_order():
    svg = render_bar_chart(golden_scores())
    assert [b[0] for b in bars(svg)] == ["NIR", "Blue", "NDWI", "SWIR2", "Red &amp; &lt;x&gt;"]


def test_zero_bar_sits_on_axis():
    svg = render_bar_chart(scores([0.0, 4.0]))
    (_, y, h), _ = bars(svg)
    assert h == 0.0 and y == axis_y(svg)


def test_all_zero_chart_renders():
    svg = render_bar_chart(scores([0.0, 0.0]))
    assert all(h == 0.0 for _, _, h in bars(svg))


def test_negative_bar_below_axis_with_proportional_height():
    svg = render_bar_chart(scores([2.0, -1.0]))
    (_, y_pos, h_pos), (_, y_neg, h_neg) = bars(svg)
    axis = axis_y(svg)
    assert h_pos == pytest.approx(2 * h_neg, abs=0.01)
    assert y_pos + h_pos == pytest.approx(axis, abs=0.01)
    assert y_neg == pytest.approx(axis, abs=0.01)
    assert svg.count("#c0504d") == 1


def test_values_are_annotated():
    svg = render_bar_chart(scores([47.123]))
    assert ">47.12<" in svg


def test_empty_chart_errors():
    with pytest.raises(ValueError):
        render_bar_chart([])
