import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crosscount import metrics
from crosscount.errors import UsageError
from crosscount.metrics import game, mae, region_counts, report, rmse, tile_bounds

from oracles import game_loops, tiles


def random_pairs(rng, n=3, h=None, w=None):
    h = h or int(rng.integers(1, 20))
    w = w or int(rng.integers(1, 20))
    return ([rng.random((h, w)) for _ in range(n)], [rng.random((h, w)) for _ in range(n)])


def test_perfect_predictions_are_zero():
    rng = np.random.default_rng(0)
    maps = [rng.random((12, 16)) for _ in range(4)]
    for lvl in range(4):
        assert game(maps, maps, lvl) == 0.0
    assert rmse(maps, maps) == 0.0


def test_game0_is_absolute_count_difference():
    p, g = np.zeros((6, 6)), np.zeros((6, 6))
    p[1, 1], g[4, 4] = 10.0, 7.0
    assert game([p], [g], 0) == 3.0


def test_game1_quadrant_example():
    # quadrant abs errors (1, 2, 0, 3) -> 6
    p, g = np.zeros((8, 8)), np.zeros((8, 8))
    p[1, 1] = 1.0
    g[1, 6] = 2.0
    p[6, 1] = g[6, 1] = 5.0
    p[6, 6] = 3.0
    assert game([p], [g], 1) == 6.0
    assert game_loops([p], [g], 1) == 6.0


def test_rmse_hand_example():
    p = [np.full((2, 2), 1.0), np.full((2, 2), 0.0)]
    g = [np.full((2, 2), 0.25), np.full((2, 2), 1.0)]  # errors +3 and -4
    assert rmse(p, g) == pytest.approx(3.5355339, abs=1e-6)
    assert math.isclose(rmse(p, g), math.sqrt(12.5))


def test_rmse_single_image_is_abs_error():
    assert rmse([np.full((3, 3), 1.0)], [np.zeros((3, 3))]) == pytest.approx(9.0)


@pytest.mark.parametrize("fn", [rmse, mae, lambda p, g: game(p, g, 0)])
def test_empty_input_is_usage_error(fn):
    with pytest.raises(UsageError):
        fn([], [])


def test_shape_and_length_mismatch():
    with pytest.raises(UsageError, match="shape"):
        game([np.zeros((4, 4))], [np.zeros((4, 5))], 0)
    with pytest.raises(UsageError):
        game([np.zeros((4, 4))] * 2, [np.zeros((4, 4))], 1)
    with pytest.raises(UsageError):
        game([np.zeros((4, 4))], [np.zeros((4, 4))], -1)


def test_report_tag_mismatch():
    with pytest.raises(UsageError):
        report([np.zeros((2, 2))], [np.zeros((2, 2))], ["dark", "bright"])


def test_matches_loop_oracle_on_random_maps():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, g = random_pairs(rng)
        for lvl in range(4):
            assert abs(game(p, g, lvl) - game_loops(p, g, lvl)) < 1e-12


def test_tile_bounds_match_oracle():
    for dim in range(1, 30):
        for lvl in range(4):
            assert tile_bounds(dim, lvl) == tiles(dim, lvl)


def test_trailing_tiles_absorb_remainder():
    assert tile_bounds(10, 2) == [(0, 2), (2, 5), (5, 7), (7, 10)]


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 25), w=st.integers(1, 25), lvl=st.integers(0, 3), seed=st.integers(0, 2**31))
def test_partition_is_exact(h, w, lvl, seed):
    m = np.random.default_rng(seed).random((h, w))
    assert abs(region_counts(m, lvl).sum() - m.sum()) < 1e-10


def test_monotone_in_level_on_random_pairs():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, g = random_pairs(rng, n=int(rng.integers(1, 4)))
        vals = [game(p, g, lvl) for lvl in range(4)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_game0_equals_mae_exactly():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, g = random_pairs(rng, n=5)
        assert game(p, g, 0) == mae(p, g)


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    p, g = random_pairs(rng, n=7, h=9, w=11)
    perm = rng.permutation(7)
    p2, g2 = [p[i] for i in perm], [g[i] for i in perm]
    for lvl in range(4):
        assert game(p, g, lvl) == pytest.approx(game(p2, g2, lvl), abs=1e-12)
    assert rmse(p, g) == pytest.approx(rmse(p2, g2), abs=1e-12)


def test_accepts_batched_tensor_shapes():
    from crosscount.tensor import Tensor
    p = Tensor(np.ones((1, 1, 4, 4)))
    assert game([p], [np.zeros((4, 4))], 0) == 16.0
    with pytest.raises(UsageError):
        metrics.as_map(np.ones((2, 1, 4, 4)))


def test_report_composes_constituents():
    rng = np.random.default_rng(5)
    p, g = random_pairs(rng, n=6, h=8, w=8)
    tags = ["bright", "dark"] * 3
    rep = report(p, g, tags)
    assert rep.n_images == 6
    assert rep.mae == rep.game[0]
    for lvl in range(4):
        assert rep.game[lvl] == game(p, g, lvl)
    dark = [i for i, t in enumerate(tags) if t == "dark"]
    assert rep.per_illumination["dark"].rmse == rmse([p[i] for i in dark], [g[i] for i in dark])
    assert rep.per_illumination["dark"].n_images == 3
    assert all(v >= 0 for _, _, v in rep.rows())


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    p, g = random_pairs(rng, n=4)
    rep = report(p, g, ["dark", "dark", "bright", "bright"])
    path = tmp_path / "m.csv"
    rep.to_csv(path)
    assert path.read_text().splitlines()[0] == "split,level_or_metric,value"
    rows = metrics.read_csv(path)
    assert rows == [(s, k, float(v)) for s, k, v in rep.rows()]
    assert ("dark", "GAME2", rep.per_illumination["dark"].game[2]) in rows
