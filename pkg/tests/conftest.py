import pytest

from tests.synthetic import City, make_city


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (training, large rasters, full pipeline)")


@pytest.fixture
def city() -> City:
    return make_city()


@pytest.fixture
def city_factory():
    return make_city
