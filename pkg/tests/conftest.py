import numpy as np
import pytest

from a2c2.datastore import Normalizer
from a2c2.envsim import EnvConfig
from a2c2.numkit import MlpSpec, init_mlp
from a2c2.policies import BasePolicy, CorrectionHead


def random_base(env: EnvConfig, H: int = 8, hidden=(32, 32), seed: int = 0) -> BasePolicy:
    """Untrained base policy; enough to exercise timelines and plumbing."""
    w = init_mlp(MlpSpec((env.obs_dim, *hidden, H * env.act_dim), False, seed))
    return BasePolicy(w, env.obs_dim, env.act_dim, H, Normalizer.identity(env.obs_dim, env.act_dim))


def random_head(env: EnvConfig, H: int = 8, hidden=(16, 16), seed: int = 1, scale: float = 0.1):
    w = init_mlp(MlpSpec((env.obs_dim + env.act_dim + 2, *hidden, env.act_dim), True, seed))
    w.weights[-1] *= np.float32(scale)
    return CorrectionHead(w, env.obs_dim, env.act_dim, H,
                          Normalizer.identity(env.obs_dim, env.act_dim))


@pytest.fixture
def pursuit() -> EnvConfig:
    return EnvConfig("pursuit")


@pytest.fixture
def holdzone() -> EnvConfig:
    return EnvConfig("holdzone")


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
