import numpy as np
import pytest
import torch

from cdrdesign.complex_model import Chain, Complex
from cdrdesign.synthetic import GenConfig, generate

torch.set_num_threads(1)

# Acceptance criteria report their verdicts here; printed at the end of the session.
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def straight_chain(seq, start=(0.0, 0.0, 0.0), step=(3.8, 0.0, 0.0)):
    """Backbone with CA on a line; N, C, O at fixed offsets."""
    n = len(seq)
    ca = np.asarray(start) + np.arange(n)[:, None] * np.asarray(step)
    atoms = np.empty((n, 4, 3))
    atoms[:, 1] = ca
    atoms[:, 0] = ca + [-1.2, 0.8, 0.0]
    atoms[:, 2] = ca + [1.3, 0.7, 0.1]
    atoms[:, 3] = ca + [1.8, 1.8, 0.2]
    return Chain(seq, atoms)


def make_complex(heavy="ACDEFGHIK", antigen="LMNPQ", spans=None, epitope=(0, 1), ag_offset=(0.0, 6.0, 0.0),
                 light="", cid="toy"):
    spans = spans or {"H3": (3, 6)}
    h = straight_chain(heavy)
    ag = straight_chain(antigen, start=ag_offset)
    lt = straight_chain(light, start=(0.0, -9.0, 0.0)) if light else Chain.empty()
    return Complex(cid, h, lt, ag, epitope, spans)


@pytest.fixture(scope="session")
def small_set():
    cx, labels = generate(GenConfig(n_complexes=8, seed=5))
    return cx, labels


@pytest.fixture
def toy():
    return make_complex()
