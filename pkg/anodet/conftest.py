import os

import pytest

from anodet.settings import reset_settings


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training runs, enabled with ANODET_RUN_SLOW=1')


def pytest_collection_modifyitems(config, items):
    if os.getenv('ANODET_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set ANODET_RUN_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Point every output and log directory into the test's tmp_path."""
    monkeypatch.setenv('ANODET_OUTPUT_ROOT', str(tmp_path / 'runs'))
    monkeypatch.setenv('ANODET_LOG_DIR', str(tmp_path / 'logs'))
    monkeypatch.setenv('ANODET_DEVICE', 'cpu')
    reset_settings()
    yield
    reset_settings()
