import pytest
import torch

from fewgan.generators import PyramidModel


@pytest.fixture
def double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def make_model(sizes=((16, 16),), seed=0, **kwargs):
    kwargs.setdefault("n_embeddings", 8)
    kwargs.setdefault("n_z", 4)
    kwargs.setdefault("lambda_pos", 1)
    kwargs.setdefault("ae_channels", 8)
    kwargs.setdefault("gan_channels", 8)
    torch.manual_seed(seed)
    model = PyramidModel(list(sizes), **kwargs)
    model.eval()
    return model


@pytest.fixture
def tiny_model():
    return make_model(sizes=((16, 16), (21, 21), (28, 28)))


_ACCEPTANCE = {}


class _Criterion:

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{self.detail} {exc!r}".strip()
        line = f"[{status}] criterion {self.number:2d}: {self.title}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    """Context manager factory recording one pass/fail line per acceptance criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
