"""
Pytest configuration and shared fixtures.
"""

import os
import sys

import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from nidslabel.attack.catalog import DEFAULT_CATALOG_PATH, AttackCatalog, load_catalog
from nidslabel.core.run_context import set_run_id
from tests.helpers import FIXTURES


def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line("markers", "slow: marks tests as slow")
    config.addinivalue_line("markers", "integration: marks integration tests")


@pytest.fixture(scope="session")
def catalog() -> AttackCatalog:
    """The bundled ATT&CK snapshot."""
    return load_catalog(DEFAULT_CATALOG_PATH)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    """Keep host NIDSLABEL_* / LLM_API_KEY settings out of tests."""
    for key in list(os.environ):
        if key.startswith("NIDSLABEL_") or key in ("LLM_API_KEY", "LOG_FORMAT", "APP_ENV"):
            monkeypatch.delenv(key, raising=False)
    set_run_id("test-run")
