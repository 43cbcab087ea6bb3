from __future__ import annotations

import numpy as np
import pytest

from flowrl.config import config_from_dict
from flowrl.errors import ArtifactIOError, FormatError
from flowrl.pipeline import _layout_key, build_dataset, load_dataset, write_dataset
from flowrl.track import extract_trajectory

RAW = {"task": "maze", "seed": 1,
       "data": {"sizes": [[4, 4], [5, 5]], "frames": 30, "cond_shape": [5, 5], "demo_count": 200,
                "train_count": 20, "heldout_count": 10}}


@pytest.fixture(scope="module")
def ds():
    return build_dataset(config_from_dict(RAW))


def test_split_sizes_and_cycling(ds):
    train, held = ds.suite("train"), ds.suite("heldout")
    assert len(train) == 20 and len(held) == 10
    assert [(t.maze.width, t.maze.height) for t in train[:4]] == [(4, 4), (5, 5), (4, 4), (5, 5)]


def test_heldout_layouts_are_unseen(ds):
    train = {_layout_key(t.maze) for t in ds.suite("train")}
    held = [_layout_key(t.maze) for t in ds.suite("heldout")]
    assert not train & set(held) and len(set(held)) == len(held)


def test_demos_are_decodable_and_avoid_heldout(ds):
    assert ds.demos.shape == (200, ds.manifest["latent_dim"])
    assert ds.demo_conds.shape == (200, ds.manifest["cond_dim"])
    held_conds = {t.cond.tobytes() for t in ds.suite("heldout")}
    assert not any(c.tobytes() in held_conds for c in ds.demo_conds)
    t = ds.suite("train")[0]
    assert extract_trajectory(t.video(t.demo_vector())) == t.gt


def test_build_is_deterministic(ds):
    again = build_dataset(config_from_dict(RAW))
    assert np.array_equal(again.demos, ds.demos) and again.manifest == ds.manifest


def test_write_load_round_trip(ds, tmp_path):
    write_dataset(ds, tmp_path)
    back = load_dataset(ds.cfg, tmp_path)
    assert [t.name for t in back.suite("heldout")] == [t.name for t in ds.suite("heldout")]
    assert np.array_equal(back.demos, ds.demos)
    assert all(a.maze == b.maze for a, b in zip(back.suite("train"), ds.suite("train")))


def test_load_errors(ds, tmp_path):
    with pytest.raises(ArtifactIOError):
        load_dataset(ds.cfg, tmp_path / "none")
    write_dataset(ds, tmp_path)
    with pytest.raises(FormatError):
        load_dataset(config_from_dict({"task": "nav"}), tmp_path)


def test_trapfield_kind_and_reserved_kind():
    cfg = config_from_dict({**RAW, "data": {**RAW["data"], "kind": "trapfield", "demo_count": 5}})
    ds = build_dataset(cfg)
    assert all(t.maze.traps for t in ds.suite("train"))
    with pytest.raises(NotImplementedError):
        build_dataset(config_from_dict({**RAW, "data": {**RAW["data"], "kind": "irregular"}}))
