"""
Test collection wiring: the fixture paths in this suite (``data/...``) are
relative to the tests directory, so collect and run the tests from there
regardless of where pytest is invoked.
"""

import os

import pytest

TESTS_DIR = os.path.dirname(os.path.abspath(__file__))


@pytest.hookimpl(hookwrapper=True)
def pytest_make_collect_report(collector):
    previous = os.getcwd()
    os.chdir(TESTS_DIR)
    try:
        yield
    finally:
        os.chdir(previous)


@pytest.fixture(autouse=True)
def _run_in_tests_dir(monkeypatch):
    monkeypatch.chdir(TESTS_DIR)
