"""
Pytest configuration and shared fixtures for mfjump tests
"""

from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_configure(config):
    """Register custom markers"""
    config.addinivalue_line("markers", "unit: marks tests as unit tests (fast, isolated)")
    config.addinivalue_line("markers", "integration: marks tests as integration tests (may use multiple components)")
    config.addinivalue_line("markers", "slow: marks tests as slow (>5 seconds)")
    config.addinivalue_line("markers", "cli: marks tests that run the command line entry point")


def pytest_collection_modifyitems(config, items):
    """Automatically add markers based on test names/paths"""
    for item in items:
        # Auto-mark command line tests
        if "test_cli" in item.nodeid:
            item.add_marker(pytest.mark.cli)
            item.add_marker(pytest.mark.integration)

        # Auto-mark solver-level tests
        if any(name in item.nodeid for name in ["test_solver", "test_sensitivity", "test_value_checks"]):
            item.add_marker(pytest.mark.integration)

        # Auto-mark unit tests (if not already marked)
        if not any(mark.name in ["integration", "slow", "cli"] for mark in item.iter_markers()):
            item.add_marker(pytest.mark.unit)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
