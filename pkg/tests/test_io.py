from __future__ import annotations

import logging
import random

import numpy as np
import pytest

from rainfall_gp.errors import ArchiveError, DataError
from rainfall_gp.forecast import FunctionalGrid
from rainfall_gp.io import (
    ChainArchive,
    config_hash,
    data_digest,
    export_grid,
    load_dataset,
    read_chain,
    read_observed,
    read_points,
    write_chain,
    write_observed,
    write_table,
)
from rainfall_gp.model import simulate_observations

STATIONS = "id,x,y,elevation\nA,0.0,0.0,100\nB,10.0,5.0,900\nC,4.0,9.0,450\n"


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def _daily_rows():
    rows = []
    rng = np.random.default_rng(0)
    for sid in "ABC":
        for day in range(1, 29):
            for year in (2001, 2002):
                rows.append(f"{sid},{year}-02-{day:02d},{rng.exponential(2.0) * (rng.uniform() < 0.4):.2f}")
    return rows


def test_threshold_rule(tmp_path):
    st = _write(tmp_path, "s.csv", "id,x,y,elevation\nA,0,0,1\nB,1,1,2\n")
    daily = _write(tmp_path, "d.csv", "id,date,rain_mm\nA,2003-01-01,0.0\nA,2003-01-02,5.2\nA,2003-01-03,0.3\n")
    d = load_dataset(st, daily, wet_threshold_mm=0.1)
    assert d.counts[0, 0] == 2
    np.testing.assert_allclose(np.exp(d.log_magnitudes), [5.2, 0.3])
    assert d.n_trials[0, 0] == 3


def test_empty_daily_file_gives_zero_counts(tmp_path):
    st = _write(tmp_path, "s.csv", STATIONS)
    d = load_dataset(st, _write(tmp_path, "d.csv", "id,date,rain_mm\n"))
    assert d.counts.sum() == 0 and d.n_events == 0
    d = load_dataset(st, _write(tmp_path, "e.csv", ""))
    assert d.counts.sum() == 0


def test_load_is_order_insensitive(tmp_path):
    st = _write(tmp_path, "s.csv", STATIONS)
    rows = _daily_rows()
    a = load_dataset(st, _write(tmp_path, "a.csv", "id,date,rain_mm\n" + "\n".join(rows) + "\n"))
    random.Random(3).shuffle(rows)
    b = load_dataset(st, _write(tmp_path, "b.csv", "id,date,rain_mm\n" + "\n".join(rows) + "\n"))
    assert data_digest(a) == data_digest(b)
    assert a.years == (2001, 2002)
    assert np.all(a.n_trials == 28)
    assert np.all(np.abs(a.points) <= 1)


def test_missing_station_year_is_logged(tmp_path, caplog):
    st = _write(tmp_path, "s.csv", STATIONS)
    rows = [r for r in _daily_rows() if not r.startswith("C,2002")]
    with caplog.at_level(logging.WARNING):
        d = load_dataset(st, _write(tmp_path, "d.csv", "id,date,rain_mm\n" + "\n".join(rows) + "\n"))
    assert d.n_trials[2, 1] == 0 and d.counts[2, 1] == 0
    assert "C/2002" in caplog.text


@pytest.mark.parametrize("row,needle", [
    ("Z,2001-01-01,1.0", "unknown station"),
    ("A,2001-01-01,-1.0", "negative"),
    ("A,2001-13-01,1.0", "malformed date"),
    ("A,2001-01-01,wet", "non-numeric"),
])
def test_bad_rows_report_line(tmp_path, row, needle):
    st = _write(tmp_path, "s.csv", STATIONS)
    daily = _write(tmp_path, "d.csv", "id,date,rain_mm\nA,2001-01-02,0.0\n" + row + "\n")
    with pytest.raises(DataError, match=needle) as err:
        load_dataset(st, daily)
    assert ":3:" in str(err.value)


def test_bad_station_file(tmp_path):
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(_write(tmp_path, "s.csv", STATIONS + "A,1,1,1\n"),
                     _write(tmp_path, "d.csv", "id,date,rain_mm\n"))
    with pytest.raises(DataError, match="missing columns"):
        load_dataset(_write(tmp_path, "t.csv", "id,x\nA,1\n"), _write(tmp_path, "d.csv", ""))


def test_observed_round_trip(tmp_path):
    st = _write(tmp_path, "s.csv", STATIONS)
    a = load_dataset(st, _write(tmp_path, "d.csv", "id,date,rain_mm\n" + "\n".join(_daily_rows()) + "\n"))
    b = read_observed(write_observed(a, tmp_path / "native"))
    assert data_digest(a) == data_digest(b)
    assert b.station_ids == a.station_ids and b.years == a.years
    np.testing.assert_array_equal(b.transform.apply(np.array([[0.0, 0.0, 100.0]])),
                                  a.transform.apply(np.array([[0.0, 0.0, 100.0]])))


def test_simulated_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (4, 2))
    d = simulate_observations(pts, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)),
                              rng.normal(size=(4, 3)), rng, n_trials=365)
    assert data_digest(read_observed(write_observed(d, tmp_path / "x"))) == data_digest(d)


def _archive(n=4):
    rng = np.random.default_rng(2)
    cfg = {"n_iterations": 10 + n, "burn_in": 10, "thin": 1, "seed": 3}
    header = {"model": "semiparametric", "seed": 3, "M": 1, "T": 1, "p": 2, "config": cfg,
              "config_hash": config_hash(cfg), "points": [[0.1, 0.2]], "transform": None}
    return ChainArchive(header, ["a", "b"], np.arange(11, 11 + n), rng.normal(size=(n, 2)))


def test_chain_round_trip_is_exact(tmp_path):
    arc = _archive()
    back = read_chain(write_chain(arc, tmp_path / "c.csv"))
    np.testing.assert_array_equal(back.draws, arc.draws)
    np.testing.assert_array_equal(back.iterations, arc.iterations)
    assert back.names == ["a", "b"] and back.model == "semiparametric"
    np.testing.assert_array_equal(back.points, [[0.1, 0.2]])


def test_chain_truncation_detected(tmp_path):
    p = write_chain(_archive(), tmp_path / "c.csv")
    text = p.read_text()
    p.write_text(text[:-7])
    with pytest.raises(ArchiveError, match="truncated"):
        read_chain(p)
    # whole line lost: newline present but row count short
    p.write_text("".join(text.splitlines(keepends=True)[:-1]))
    with pytest.raises(ArchiveError, match="rows"):
        read_chain(p)


def test_chain_header_mismatch(tmp_path):
    arc = _archive()
    arc.header["config"]["n_iterations"] = 30
    with pytest.raises(ArchiveError, match="config implies"):
        read_chain(write_chain(arc, tmp_path / "c.csv"))
    p = write_chain(_archive(), tmp_path / "d.csv")
    lines = p.read_text().splitlines()
    lines[3] += ",9"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ArchiveError, match="fields"):
        read_chain(p)


def test_config_hash_is_key_order_free():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def _grid(n):
    pts = np.linspace(-1, 1, 2 * n).reshape(n, 2)
    med = np.arange(n, dtype=float)
    return FunctionalGrid(pts, med, med - 0.5, med + 0.5, "event-mean", 10, 0)


def test_export_grid(tmp_path):
    p = export_grid(_grid(1), tmp_path / "g.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "x,y,median,q05,q95" and len(lines) == 2
    p2 = export_grid(_grid(5), tmp_path / "g2.csv")
    data = np.loadtxt(p2, delimiter=",", skiprows=1)
    assert np.all(data[:, 3] <= data[:, 2]) and np.all(data[:, 2] <= data[:, 4])
    assert p2.read_bytes() == export_grid(_grid(5), tmp_path / "g3.csv").read_bytes()


def test_tables_and_points(tmp_path):
    p = write_table(tmp_path / "t.csv", ["id", "x", "y"], [("a", 0.5, -0.25), ("b", 1.0, 0.0)])
    np.testing.assert_array_equal(read_points(p), [[0.5, -0.25], [1.0, 0.0]])
