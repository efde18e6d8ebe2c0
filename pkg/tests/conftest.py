import functools

import pytest

from idiomcircuits.fixtures import load_planted


@functools.lru_cache(maxsize=None)
def planted(name):
    return load_planted(name)


@pytest.fixture(scope="session")
def get_planted():
    return planted
