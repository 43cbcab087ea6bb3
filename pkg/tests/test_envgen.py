from __future__ import annotations

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowrl.envgen import (
    MazeKind,
    check_maze_invariants,
    check_nav_invariants,
    dijkstra_length,
    gen_nav_scene,
    gen_regular_maze,
    gen_trapfield,
    is_valid_path,
    load_maze,
    make_demo,
    maze_from_text,
    maze_to_text,
    save_maze,
    solve_optimal,
)
from flowrl.errors import FormatError, GenerationFailure, InvalidArgument


def maze_graph(maze):
    g = nx.Graph()
    for cell in maze.cells():
        if cell in maze.traps:
            continue
        g.add_node(cell)
        for nb in maze.open_neighbors(cell):
            g.add_edge(cell, nb)
    return g


def test_regular_maze_is_deterministic():
    assert gen_regular_maze(1, 3, 3) == gen_regular_maze(1, 3, 3)
    assert maze_to_text(gen_regular_maze(7, 6, 5)) == maze_to_text(gen_regular_maze(7, 6, 5))


def test_regular_maze_corners_and_kind():
    m = gen_regular_maze(3, 5, 4)
    assert m.start == (0, 0) and m.goal == (3, 4)
    assert m.kind is MazeKind.REGULAR and not m.traps


def test_regular_maze_is_perfect():
    # a spanning tree: connected with exactly cells - 1 open edges
    for seed in range(30):
        g = maze_graph(gen_regular_maze(seed, 6, 5))
        assert nx.is_tree(g)


def test_optimal_path_is_the_unique_simple_path():
    m = gen_regular_maze(1, 3, 3)
    paths = list(nx.all_simple_paths(maze_graph(m), m.start, m.goal))
    assert len(paths) == 1
    assert list(solve_optimal(m)) == paths[0]


@pytest.mark.parametrize("seed", range(1, 101))
def test_regular_invariants_8x8(seed):
    check_maze_invariants(gen_regular_maze(seed, 8, 8))


def test_dimension_below_minimum():
    with pytest.raises(InvalidArgument):
        gen_regular_maze(0, 2, 5)
    with pytest.raises(InvalidArgument):
        gen_trapfield(0, 5, 2, 0.1)


def test_open_trapfield_path_is_manhattan():
    m = gen_trapfield(4, 7, 5, 0.0)
    assert not m.traps
    assert len(solve_optimal(m)) - 1 == (7 - 1) + (5 - 1)


def test_trapfield_traps_avoid_endpoints_and_path_exists():
    m = gen_trapfield(11, 6, 6, 0.2)
    assert m.traps
    assert m.start not in m.traps and m.goal not in m.traps
    assert nx.has_path(maze_graph(m), m.start, m.goal)
    check_maze_invariants(m)


def test_trap_fraction_above_limit():
    with pytest.raises(InvalidArgument):
        gen_trapfield(0, 6, 6, 0.5)


def test_trapfield_retry_budget(monkeypatch):
    import flowrl.envgen as envgen

    monkeypatch.setattr(envgen, "_bfs_parents", lambda maze: None)
    with pytest.raises(GenerationFailure):
        gen_trapfield(0, 5, 5, 0.3)


def test_bfs_3x3_open_grid():
    assert len(solve_optimal(gen_trapfield(0, 3, 3, 0.0))) == 5


def test_bfs_tie_break_is_canonical():
    # open grid: up/right/down/left expansion from the start walks right along the top row first
    path = solve_optimal(gen_trapfield(0, 4, 3, 0.0))
    assert path[:4] == ((0, 0), (0, 1), (0, 2), (0, 3))


def test_bfs_matches_dijkstra_on_trapfields():
    rng = np.random.default_rng(5)
    for seed in range(100):
        w, h = (int(v) for v in rng.integers(3, 9, 2))
        m = gen_trapfield(seed, w, h, float(rng.uniform(0, 0.4)))
        path = solve_optimal(m)
        assert is_valid_path(m, path)
        assert len(path) == dijkstra_length(m)
        assert len(path) == nx.shortest_path_length(maze_graph(m), m.start, m.goal) + 1


def test_make_demo_without_resampling():
    m = gen_trapfield(0, 4, 4, 0.0)
    path = ((0, 0), (0, 1), (1, 1), (2, 1))
    lat = make_demo(m, path, 4)
    np.testing.assert_array_equal(lat.waypoints, [[0.5, 0.5], [0.5, 1.5], [1.5, 1.5], [2.5, 1.5]])
    assert not lat.bg_field.any()


def test_make_demo_midpoint():
    lat = make_demo(gen_trapfield(0, 3, 3, 0.0), ((0, 0), (0, 1)), 3)
    np.testing.assert_allclose(lat.waypoints[1], [0.5, 1.0])


def test_make_demo_too_few_frames():
    m = gen_regular_maze(0, 4, 4)
    with pytest.raises(InvalidArgument):
        make_demo(m, solve_optimal(m), len(solve_optimal(m)) - 1)


def test_maze_text_round_trip(tmp_path):
    for m in (gen_regular_maze(9, 5, 7), gen_trapfield(2, 6, 4, 0.3)):
        assert maze_from_text(maze_to_text(m)) == m
        save_maze(m, tmp_path / "m.maze")
        assert load_maze(tmp_path / "m.maze") == m


def test_maze_text_layout():
    text = maze_to_text(gen_trapfield(0, 3, 3, 0.0))
    lines = text.splitlines()
    assert lines[0] == "MAZE trapfield 3 3 0"
    assert lines[1:4] == ["E 00"] * 3
    assert lines[4:6] == ["S 000"] * 2
    assert lines[6:] == ["START 0 0", "GOAL 2 2"]


@pytest.mark.parametrize("text", ["", "MAZX regular 3 3 0\n", "MAZE regular 3 3 0\nE 00\n",
                                  "MAZE regular 3 3 0\nE 00\nE 00\nE 00\nS 000\nS 000\nGOAL 2 2\n"])
def test_malformed_maze_text(text):
    with pytest.raises(FormatError):
        maze_from_text(text)


@pytest.mark.parametrize("seed", range(100))
def test_nav_invariants(seed):
    check_nav_invariants(gen_nav_scene(seed))


def test_nav_scene_is_deterministic():
    assert gen_nav_scene(17) == gen_nav_scene(17)


def test_nav_scene_without_obstacles_is_a_uniform_segment():
    scenes = [s for s in (gen_nav_scene(i) for i in range(200)) if len(s.obstacles) == 0]
    assert scenes
    for s in scenes[:10]:
        ref = s.reference
        steps = np.linalg.norm(np.diff(ref, axis=0), axis=1)
        np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
        direction = (ref[-1] - ref[0]) / np.linalg.norm(ref[-1] - ref[0])
        offsets = (ref - ref[0]) @ np.array([-direction[1], direction[0]])
        np.testing.assert_allclose(offsets, 0.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**40), w=st.integers(3, 8), h=st.integers(3, 8), frac=st.floats(0.0, 0.4))
def test_generated_mazes_are_solvable(seed, w, h, frac):
    for m in (gen_regular_maze(seed, w, h), gen_trapfield(seed, w, h, frac)):
        check_maze_invariants(m)
        assert is_valid_path(m, solve_optimal(m))
