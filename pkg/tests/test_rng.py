import numpy as np
import pytest

from prweave import rng


def _draw(*key):
    return rng.generator(*key).integers(0, 2**63, size=4).tolist()


def test_same_key_same_stream():
    assert _draw(5, "data", 1, 2) == _draw(5, "data", 1, 2)


@pytest.mark.parametrize("a, b", [
    ((0, "init"), (0, "init", 0)),  # trailing zero index
    ((0, "eval", 2, 7), (0, "eval", 2, 7, 0)),
    ((2**32, "data"), (0, "data", 1)),  # high seed word vs an index
    ((1, "noise", 0, 1), (1, "noise", 1, 0)),
    ((3, "data", 0), (3, "noise", 0)),
])
def test_distinct_keys_do_not_alias(a, b):
    assert _draw(*a) != _draw(*b)


def test_unknown_stream_and_negative_index():
    with pytest.raises(KeyError):
        rng.generator(0, "weights")
    with pytest.raises(ValueError):
        rng.generator(0, "data", -1)


def test_describe_lists_streams():
    d = rng.describe()
    assert set(d["streams"]) == set(rng.STREAMS)
    assert all(isinstance(v, int) for v in d["streams"].values())
