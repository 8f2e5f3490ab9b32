import numpy as np
import pytest

from kestenlab.streams import SEED_ENV, block_sizes, make_rng, map_blocks, resolve_seed, run_blocks


def _draw(n, rng, scale):
    return scale * rng.random(n)


def test_same_key_same_stream():
    a = make_rng(7, "tail").random(5)
    b = make_rng(7, "tail").random(5)
    np.testing.assert_array_equal(a, b)


def test_different_keys_differ():
    assert make_rng(7, "tail").random() != make_rng(7, "passage").random()
    assert make_rng(7).random() != make_rng(8).random()


@pytest.mark.parametrize("n,block,expected", [(0, 4, []), (3, 4, [3]), (8, 4, [4, 4]), (9, 4, [4, 4, 1])])
def test_block_sizes(n, block, expected):
    assert block_sizes(n, block) == expected


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None, 42) == 42
    assert resolve_seed(5, 42) == 5
    monkeypatch.setenv(SEED_ENV, "11")
    assert resolve_seed(5, 42) == 11


def test_map_blocks_keeps_order():
    tasks = [(k,) for k in range(6)]
    assert map_blocks(abs, tasks, workers=1) == map_blocks(abs, tasks, workers=3) == list(range(6))


def test_run_blocks_is_independent_of_workers():
    sizes = block_sizes(10, 3)
    one = run_blocks(_draw, sizes, make_rng(3), workers=1, args=(2.0,))
    many = run_blocks(_draw, sizes, make_rng(3), workers=4, args=(2.0,))
    for a, b in zip(one, many):
        np.testing.assert_array_equal(a, b)
    assert [len(a) for a in one] == sizes
