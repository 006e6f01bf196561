import doctest
import importlib
import pkgutil

import pytest

import spikingdd

MODULES = [m.name for m in pkgutil.iter_modules(spikingdd.__path__, "spikingdd.")]


@pytest.mark.parametrize("name", MODULES)
def test_module_doctests(name):
    result = doctest.testmod(importlib.import_module(name))
    assert result.failed == 0
