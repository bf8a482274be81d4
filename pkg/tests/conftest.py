import sys

import numpy as np
import pytest

from voxlift.geometry import CameraView, Extrinsics, Intrinsics


def make_view(eye, target=(0.0, 0.0, 0.4), image=(48, 64), feature=(12, 16), f=32.0) -> CameraView:
    H, W = image
    K = Intrinsics(f, f, (W - 1) / 2, (H - 1) / 2)
    return CameraView(K, Extrinsics.look_at(eye, target), image, feature)


def ring_views(n=4, radius=3.0, height=1.5, phase=0.3):
    return [make_view((radius * np.cos(phase + 2 * np.pi * i / n), radius * np.sin(phase + 2 * np.pi * i / n), height))
            for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def views():
    return ring_views()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
