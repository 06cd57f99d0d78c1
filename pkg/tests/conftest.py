import pytest

from evbotnet.grid_model import load_case


@pytest.fixture(scope="session")
def net33():
    return load_case("case33bw")


@pytest.fixture(scope="session")
def net39():
    return load_case("case39")
