import numpy as np
import pytest

from headfold.layers import AttentionParams, FfnParams, LayerNormParams
from headfold.rng import RngStream
from headfold.tensor import Tensor


def random_attention(rng: RngStream, m: int, h: int, d_head: int | None = None, bias: bool = False):
    d = d_head if d_head is not None else m // h
    w = h * d

    def mat(shape):
        return Tensor(rng.normal(shape, 1.0 / np.sqrt(shape[0])))

    biases = [Tensor(rng.normal((n,), 0.1)) for n in (w, w, w, m)] if bias else [None] * 4
    return AttentionParams(mat((m, w)), mat((m, w)), mat((m, w)), mat((w, m)), h, *biases)


def random_ffn(rng: RngStream, m: int, d_ffn: int, activation: str = "relu", bias: bool = False):
    b_in = Tensor(rng.normal((d_ffn,), 0.1)) if bias else None
    b_out = Tensor(rng.normal((m,), 0.1)) if bias else None
    return FfnParams(
        Tensor(rng.normal((m, d_ffn), 1.0 / np.sqrt(m))),
        Tensor(rng.normal((d_ffn, m), 1.0 / np.sqrt(d_ffn))),
        activation,
        b_in,
        b_out,
    )


def random_norm(rng: RngStream, m: int):
    return LayerNormParams(Tensor(rng.uniform(0.5, 1.5, (m,))), Tensor(rng.normal((m,), 0.1)))


@pytest.fixture
def rng():
    return RngStream(1234)


# -- acceptance summary ------------------------------------------------------------
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
