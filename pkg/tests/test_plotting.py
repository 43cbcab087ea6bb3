from __future__ import annotations

import pytest

from flowrl.errors import ArtifactIOError, FormatError
from flowrl.plotting import count_points, plot_log, plot_series, read_jsonl


def test_series_point_count(tmp_path):
    plot_series([1, 4, 8], {"a": [0.1, 0.2, 0.3], "b": [0.0, 0.1, 0.1]}, tmp_path / "s.svg", "K", "r")
    assert count_points(tmp_path / "s.svg") == 6


def test_plot_is_reproducible(tmp_path):
    log = tmp_path / "l.jsonl"
    log.write_text("".join(f'{{"iteration": {i}, "mean_reward": {i / 10}}}\n' for i in range(5)))
    assert plot_log(log, tmp_path / "a.svg") == 5
    plot_log(log, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_log_errors(tmp_path):
    (tmp_path / "empty.jsonl").write_text("\n")
    with pytest.raises(FormatError):
        plot_log(tmp_path / "empty.jsonl", tmp_path / "x.svg")
    (tmp_path / "l.jsonl").write_text('{"iteration": 0}\n')
    with pytest.raises(FormatError):
        plot_log(tmp_path / "l.jsonl", tmp_path / "x.svg", ["mean_reward"])
    with pytest.raises(ArtifactIOError):
        read_jsonl(tmp_path / "missing.jsonl")
