import sys
from pathlib import Path

import numpy as np
import pytest

from align_qi.geometry import CameraCalibration

sys.path.insert(0, str(Path(__file__).parent))

# LiDAR x forward, y left, z up  ->  camera x right, y down, z forward
LIDAR_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def make_camera(camera_id=0, width=1600, height=900, f=1000.0, cx=800.0, cy=450.0,
                rotation=LIDAR_TO_CAM, translation=(0.0, 0.0, 0.0)):
    K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    E = np.eye(4)
    E[:3, :3] = rotation
    E[:3, 3] = translation
    return CameraCalibration(K, E, width, height, camera_id)


@pytest.fixture
def front_camera():
    return make_camera()


@pytest.fixture
def identity_camera():
    return make_camera(rotation=np.eye(3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
