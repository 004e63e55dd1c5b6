from pathlib import Path

import pytest

from cyclesched.trace import parse_trace

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def three_jobs():
    return parse_trace(FIXTURES / "three_jobs.jsonl")


@pytest.fixture
def anti_pair():
    return parse_trace(FIXTURES / "anti_pair.jsonl")
