"""Shared fixtures: expert datasets and models trained once per session."""

import pytest

from decil.envs import generate_dataset, make_env
from decil.models import TrainConfig, train_baseline, train_denoiser, train_dynamics


class Trained:
    """Lazily trained default-config models for one environment."""

    def __init__(self, env_id, n_traj=20, seed=0):
        self.env = make_env(env_id)
        self.data = generate_dataset(self.env, n_traj, seed)
        self.cfg = TrainConfig(seed=seed)
        self._cache = {}

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def f(self):
        return self._get("f", lambda: train_dynamics(self.data, self.cfg)[0])

    @property
    def d(self):
        return self._get("d", lambda: train_denoiser(self.data, self.cfg)[0])

    @property
    def d_clean(self):
        cfg = TrainConfig(sigma=0.0, seed=self.cfg.seed)
        return self._get("d0", lambda: train_denoiser(self.data, cfg)[0])

    def baseline(self, variant):
        return self._get(variant, lambda: train_baseline(self.data, self.cfg, variant)[0])


@pytest.fixture(scope="session")
def sinusoid():
    return Trained("sinusoid")


@pytest.fixture(scope="session")
def pointmass():
    return Trained("pointmass_crossing")


_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)
