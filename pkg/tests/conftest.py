import logging

import numpy as np
import pytest

from grid import GridSpec
from mpchol import PrecisionMap
from pipeline import EmulatorModel
from stochastic import InnovationModel, NoiseField, VarModel
from trend import TrendParams


def pytest_addoption(parser):
    parser.addoption(
        "--run-benchmark", action="store_true", default=False, help="执行计时测试并报告加速比"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-benchmark"):
        return
    skip = pytest.mark.skip(reason="计时测试默认跳过，使用 --run-benchmark 执行")
    for item in items:
        if "benchmark" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _propagate_logs():
    logging.getLogger("sphemu").propagate = True
    yield


@pytest.fixture
def small_spec() -> GridSpec:
    return GridSpec.from_band_limit(4)


@pytest.fixture
def make_model():
    """按给定参数直接组装一个模拟器模型，不经过训练。"""

    def factory(
        spec: GridSpec,
        *,
        P: int = 0,
        phi=0.0,
        u=None,
        beta0: float = 0.0,
        sigma: float = 1.0,
        v2: float = 0.0,
        K: int = 0,
        tau: int = 12,
        a=(),
        b=(),
        variant: str = "dp",
        forcing=None,
    ) -> EmulatorModel:
        n = spec.band_limit**2
        phi_values = np.broadcast_to(np.asarray(phi, dtype=float), (P, n)).copy()
        u = np.eye(n) if u is None else np.asarray(u, dtype=float)
        return EmulatorModel(
            spec=spec,
            trend=TrendParams.constant(
                spec, K=K, tau=tau, beta0=beta0, sigma=sigma, a=a, b=b
            ),
            var=VarModel(P=P, band_limit=spec.band_limit, phi=phi_values),
            innovation=InnovationModel.from_covariance(u, PrecisionMap(variant), tile_size=8),
            noise=NoiseField(spec=spec, v_squared=np.full(spec.shape, float(v2))),
            provenance={"burn_in_factor": 10, **spec.to_dict()},
            forcing=forcing,
        )

    return factory
