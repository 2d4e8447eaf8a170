"""Shared fixtures: generic random networks, a reference pretrained model,
and the acceptance-criteria summary printed at the end of the session."""

import numpy as np
import pytest

from progrpo.dynamics import NoiseSchedule
from progrpo.policy import MlpSpec, PolicyParams, init_policy
from progrpo.pretrain import DatasetSpec, PretrainConfig, pretrain_run

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance-criterion verdict, then assert it.

    The recorded lines are replayed in the terminal summary so a full run
    always ends with one pass/fail line per criterion.
    """

    def record(num, desc, ok, detail=""):
        _CRITERIA[num] = (desc, bool(ok))
        assert ok, f"criterion {num} failed: {desc} {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        desc, ok = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {desc}")


def generic_params(spec: MlpSpec, seed: int, scale: float = 0.3) -> PolicyParams:
    """Random network with a non-zero final layer, for gradient and loss tests.

    The default init zeroes the final layer (useful for training, degenerate
    for derivative checks), so this replaces every layer with seeded Gaussian
    weights at a controlled scale.
    """
    rng = np.random.default_rng(seed)
    base = init_policy(spec, seed=seed)
    weights = tuple(
        np.ascontiguousarray(scale * rng.standard_normal(w.shape) / np.sqrt(w.shape[1]))
        for w in base.weights
    )
    biases = tuple(
        np.ascontiguousarray(0.1 * scale * rng.standard_normal(b.shape)) for b in base.biases
    )
    return PolicyParams(spec=spec, weights=weights, biases=biases, version=0)


@pytest.fixture(scope="session")
def small_spec() -> MlpSpec:
    return MlpSpec(latent_dim=2, hidden=(16, 16), n_contexts=2, time_frequencies=4)


@pytest.fixture(scope="session")
def ring_reference(tmp_path_factory):
    """Fully pretrained default-config ring generator plus its loss curve.

    One 20k-step run shared by every test that needs a competent sampler
    (convergence gate, proxy fidelity, the behavioral alignment runs). Takes
    a couple of minutes; everything cheap lives elsewhere.
    """
    curve = tmp_path_factory.mktemp("pretrain") / "curve.csv"
    config = PretrainConfig(
        dataset=DatasetSpec(),
        policy=MlpSpec(),
        schedule=NoiseSchedule(),
        steps=20000,
        batch_size=256,
        learning_rate=1e-3,
        seed=0,
        curve_path=str(curve),
    )
    params = pretrain_run(config)
    rows = np.genfromtxt(curve, delimiter=",", names=True)
    return params, rows
