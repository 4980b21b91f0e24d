"""Shared fixtures: the replay corpus is built once per session."""

from __future__ import annotations

import pytest

from corpusgen import build_workspace


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return build_workspace(tmp_path_factory.mktemp("corpus"))
