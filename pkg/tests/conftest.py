import pytest

from ropedit.mmdit import ModelConfig, init_model

SMALL = ModelConfig(
    n_multi=1, n_single=2, heads=2, head_dim=8, text_len=6,
    grid_h=6, grid_w=6, vocab_buckets=512, steps_T=6,
)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_model():
    return init_model(SMALL, 11)


@pytest.fixture(scope="session")
def toy_model():
    return init_model(ModelConfig(), 0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
