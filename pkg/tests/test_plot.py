import pytest

from rotcloud.plot import plot, read_series


def write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def test_single_pck_series(tmp_path):
    f = write(tmp_path / "run.csv", ("threshold", "value"), [(0.0, 0.0), (0.1, 0.6), (0.2, 1.0)])
    plot([f], "pck", tmp_path / "out.svg")
    svg = (tmp_path / "out.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 1


def test_legend_uses_file_stems(tmp_path):
    a = write(tmp_path / "pretrained.csv", ("fraction", "accuracy"), [(0.1, 0.8), (1.0, 0.9)])
    b = write(tmp_path / "random.csv", ("fraction", "accuracy"), [(0.1, 0.6), (1.0, 0.85)])
    plot([a, b], "sweep", tmp_path / "out.svg")
    svg = (tmp_path / "out.svg").read_text()
    assert svg.count('class="series"') == 2
    assert ">pretrained</text>" in svg and ">random</text>" in svg


def test_deterministic(tmp_path):
    f = write(tmp_path / "t1.csv", ("k", "accuracy"), [(6, 0.99), (18, 0.9), (100, 0.4)])
    plot([f], "table1", tmp_path / "a.svg")
    plot([f], "table1", tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_missing_column(tmp_path):
    f = write(tmp_path / "x.csv", ("fraction", "accuracy"), [(0.1, 0.5)])
    with pytest.raises(ValueError, match="missing column 'threshold'"):
        plot([f], "pck", tmp_path / "o.svg")


def test_series_sorted(tmp_path):
    f = write(tmp_path / "s.csv", ("fraction", "accuracy"), [(1.0, 0.9), (0.1, 0.5)])
    assert read_series(f, "sweep") == [(0.1, 0.5), (1.0, 0.9)]


def test_unknown_kind(tmp_path):
    with pytest.raises(ValueError, match="unknown plot kind"):
        read_series(tmp_path / "x.csv", "bar")
