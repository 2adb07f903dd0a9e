import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ORACLES = os.path.join(os.path.dirname(__file__), "oracles")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class SmokeRun:
    """Desk-profile training run shared by the slow end-to-end checks."""

    def __init__(self):
        import time

        from icdt import data, engine, metrics
        from icdt.config import desk_profile
        from icdt.pipeline import build_trainer

        self.cfg = desk_profile()
        self.deg8, self.ref8 = data.synthetic_arrays(64, self.cfg.side, seed=0)
        self.test_deg8, self.test_ref8 = data.synthetic_arrays(32, self.cfg.side, seed=1)
        start = time.perf_counter()
        self.trainer = build_trainer(self.cfg, self.deg8, self.ref8)
        self.reports = self.trainer.fit(
            engine.from_uint8(self.deg8), engine.from_uint8(self.ref8), self.cfg.iterations
        )
        self.train_seconds = time.perf_counter() - start
        from icdt.scaling import noise_draws

        self.draws = noise_draws((32, self.cfg.side, self.cfg.side, 3), seed=0, draws=5)
        self._samples = {}
        self.psnr = metrics.psnr

    def enhance(self, steps: int, use_ema: bool = True, draw: int = 0) -> np.ndarray:
        from icdt import engine

        key = (steps, use_ema, draw)
        if key not in self._samples:
            seed, x_T = self.draws[draw]
            self._samples[key] = self.trainer.enhance(
                engine.from_uint8(self.test_deg8), steps=steps, seed=seed, use_ema=use_ema, x_T=x_T
            )
        return self._samples[key]

    def mean_psnr(self, images: np.ndarray) -> float:
        return float(np.mean([self.psnr(a, b) for a, b in zip(images, self.test_ref8)]))

    def draw_psnr(self, steps: int, use_ema: bool = True) -> list:
        """Held-out mean PSNR for each noise draw."""
        return [self.mean_psnr(self.enhance(steps, use_ema, r)) for r in range(len(self.draws))]


@pytest.fixture(scope="session")
def smoke():
    return SmokeRun()


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
