# Repo root on sys.path so `models` and `d3net_app` import as in the scripts.


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training run taking minutes; skip with -m 'not slow'")
