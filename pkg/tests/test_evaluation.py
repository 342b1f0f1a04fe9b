import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtta.adapt import TELEMETRY_COLUMNS, run_stream
from mtta.config import RunConfig, merge
from mtta.evaluation import (
    BASELINE,
    GRIDS,
    Cell,
    ablation_grid,
    by_seed,
    cartesian,
    cell_stats,
    final_quarter_mpjpe,
    load_grid,
    moving_average,
    progress_curves,
    read_telemetry,
    report,
    save_grid,
    sign_test,
    suite_profiles,
    summarize,
    write_telemetry,
)
from mtta.plotting import line_plot_svg
from mtta.stream import preset


def rows_for(values: dict[int, list[float]], drift=0.0):
    return [{"person_id": pid, "batch_idx": b, "mpjpe_mm": v, "mpjpe_pa_mm": v / 2, "L_F": 0.1, "L_M": 0.2,
             "L_ach": 0.3, "drift": drift + b, "codebook_util": 1.0, "wall_ms": 5.0}
            for pid, vs in values.items() for b, v in enumerate(vs)]


def tiny_cfg(minutes_batches=2):
    cfg = RunConfig()
    cfg.suite.n_persons = 2
    cfg.suite.minutes = minutes_batches * 160 / 1800 + 1e-9
    cfg.adapt = merge(cfg.adapt, {"cycles": 1})
    return cfg


@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e3, 1e3)), st.integers(1, 9))
def test_moving_average_preserves_mean(x, window):
    assert abs(moving_average(x, window).mean() - x.mean()) <= 1e-9
    assert len(moving_average(x, window)) == len(x)


def test_moving_average_examples():
    np.testing.assert_allclose(moving_average(np.full(7, 3.0)), 3.0)
    np.testing.assert_allclose(moving_average([0, 0, 5, 0, 0, 0, 0]), [1, 1, 1, 1, 1, 0, 0])
    np.testing.assert_allclose(moving_average([5, 0, 0, 0, 0, 0, 0]), [1, 1, 1, 0, 0, 1, 1])  # wraps around
    np.testing.assert_array_equal(moving_average([1.0, 2.0], 1), [1.0, 2.0])


def test_progress_curves():
    base = rows_for({0: [10, 11, 12, 13, 14, 15], 1: [5, 5, 5, 5, 5, 5]})
    same = progress_curves(base, base)
    for x, y in same.values():
        np.testing.assert_array_equal(y, 0.0)
        np.testing.assert_allclose(x, np.arange(6) / 6)
    shifted = rows_for({0: [11, 12, 13, 14, 15, 16], 1: [6] * 6})
    for _, y in progress_curves(shifted, base).values():
        np.testing.assert_allclose(y, 1.0)
    with pytest.raises(ValueError):
        progress_curves(rows_for({0: [1, 2, 3], 1: [1, 2, 3]}), base)
    with pytest.raises(ValueError):
        progress_curves(rows_for({2: [1] * 6, 1: [1] * 6}), base)


def test_final_quarter_oracle():
    rows = rows_for({0: [9, 9, 9, 9, 9, 9, 1, 3], 1: [0, 0, 0, 0, 0, 0, 0, 10]})
    assert final_quarter_mpjpe(rows) == pytest.approx(((1 + 3) / 2 + (0 + 10) / 2) / 2)


def test_sign_test():
    a = {s: 1.0 for s in range(5)}
    b = {0: 2.0, 1: 2.0, 2: 2.0, 3: 2.0, 4: 0.5}
    wins, n, p = sign_test(a, b)
    assert (wins, n) == (4, 5) and p == pytest.approx(0.375)
    assert sign_test(a, a) == (0, 0, 1.0)


def test_named_grids_and_axes():
    assert [c.name for c in GRIDS["decay"]] == ["mu_f=0.0", "mu_f=0.9", "mu_f=0.95", "mu_f=1.0"]
    assert [c.overrides["k"] for c in GRIDS["depth"]] == [0, 1, 2, 3]
    cells = cartesian({"soft_reset": [True, False], "k": [0, 3]})
    assert [c.name for c in cells] == ["soft_reset=on,k=0", "soft_reset=on,k=3", "soft_reset=off,k=0",
                                       "soft_reset=off,k=3"]
    assert cells[2].overrides == {"use_soft_reset": False, "k": 0}
    assert cartesian({"mu_m": [None]})[0].name == "mu_m=off"
    with pytest.raises(ValueError):
        cartesian({"bogus": [1]})


def test_telemetry_round_trip(tmp_path):
    rows = rows_for({3: [1 / 3, math.nan, 1e-17]})
    write_telemetry(tmp_path / "t.csv", rows)
    back = read_telemetry(tmp_path / "t.csv")
    assert list(back[0]) == list(TELEMETRY_COLUMNS)
    for a, b in zip(rows, back):
        for k in TELEMETRY_COLUMNS:
            assert (a[k] == b[k]) or (math.isnan(a[k]) and math.isnan(b[k]))


def _fake_grid():
    tel = {}
    for seed in (1, 2, 3):
        tel[(BASELINE, seed)] = rows_for({0: [20.0 + seed] * 8, 1: [22.0] * 8})
        tel[("full", seed)] = rows_for({0: [10.0 + seed + 0.1 * b for b in range(8)], 1: [12.0] * 8}, drift=seed)
        tel[("neither", seed)] = rows_for({0: [15.0] * 8, 1: [16.0 - seed] * 8})
    return tel


def test_report_is_deterministic_and_traceable(tmp_path):
    tel = _fake_grid()
    text = report(tel, tmp_path / "a", suite={"n_persons": 2, "minutes": 1, "shift": "standard"})
    report(tel, tmp_path / "b", suite={"n_persons": 2, "minutes": 1, "shift": "standard"})
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert {"report.md", "grid.csv", "summary.csv"} <= {str(f) for f in files}
    assert any(str(f).endswith(".svg") for f in files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    stats = cell_stats(summarize(tel))
    per_seed = by_seed(summarize(tel), "full")
    assert stats["full"]["final_quarter_mpjpe_mm"][0] == np.mean(list(per_seed.values()))
    assert f"{stats['full']['final_quarter_mpjpe_mm'][0]:.2f}" in text
    assert "sign test" in text.lower()
    grid_csv = (tmp_path / "a" / "grid.csv").read_text().splitlines()
    full_rows = [line.split(",") for line in grid_csv[1:] if line.startswith("full,")]
    assert [float(r[2]) for r in full_rows] == [per_seed[s] for s in (1, 2, 3)]


def test_empty_report_is_header_only(tmp_path):
    text = report({}, tmp_path)
    assert text.startswith("# Ablation report")
    assert "|---|" in text and "sign" not in text.lower()


def test_grid_save_and_load(tmp_path):
    tel = _fake_grid()
    cfg = RunConfig()
    save_grid(tmp_path, tel, [Cell("full"), Cell("neither")], cfg)
    back, index = load_grid(tmp_path)
    assert back == tel
    assert index["suite"]["shift"] == "standard"


def test_svg_is_deterministic():
    curves = {"person 0": (np.linspace(0, 1, 5), np.array([0.0, -1.0, -2.0, -2.5, -3.0]))}
    a = line_plot_svg(curves, "progress", "mm", "title")
    assert a == line_plot_svg(curves, "progress", "mm", "title")
    assert a.lstrip().startswith("<?xml") and "<svg" in a


def test_degenerate_grid_equals_run_stream(tiny_pre):
    cfg = tiny_cfg()
    grid = ablation_grid(tiny_pre, cfg, [Cell("full")], [5], baseline=False)
    direct = run_stream(tiny_pre, suite_profiles(cfg.suite), preset(cfg.suite.shift), cfg.adapt, 5,
                        cfg.suite.minutes)
    strip = [{k: v for k, v in r.items() if k != "wall_ms"} for r in direct]
    assert [{k: v for k, v in r.items() if k != "wall_ms"} for r in grid[("full", 5)]] == strip


def test_execution_order_does_not_matter(tiny_pre):
    cfg = tiny_cfg()
    cfg.adapt = merge(cfg.adapt, {"record_timing": False})
    cells = [Cell("full"), Cell("neither", {"use_soft_reset": False, "k": 0})]
    a = ablation_grid(tiny_pre, cfg, cells, [1, 2])
    b = ablation_grid(tiny_pre, cfg, cells[::-1], [2, 1])
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)
    assert all(r["mpjpe_mm"] > 0 for r in a[(BASELINE, 1)])


def test_invalid_cells_are_skipped(tiny_pre, caplog):
    cfg = tiny_cfg(1)
    out = ablation_grid(tiny_pre, cfg, [Cell("bad", {"mu_f": 3.0})], [1], baseline=False)
    assert out == {}
    assert "skipping cell" in caplog.text
