from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def raw_log_path() -> Path:
    return DATA / "traverse_raw.log"


@pytest.fixture(scope="session")
def obd_log_path() -> Path:
    return DATA / "traverse_obd.log"


@pytest.fixture(scope="session")
def raw_csv_path() -> Path:
    return DATA / "traverse_raw.csv"


@pytest.fixture(scope="session")
def raw_lines(raw_log_path) -> list[str]:
    return raw_log_path.read_text().splitlines()


@pytest.fixture(scope="session")
def obd_lines(obd_log_path) -> list[str]:
    return obd_log_path.read_text().splitlines()
