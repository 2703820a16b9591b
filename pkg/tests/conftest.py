import numpy as np
import pytest
from scipy.spatial import ConvexHull

from canthus.facegen import cached_face_model, tetrahedron_model, tiny_model


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def sphere_mesh(n: int = 2000):
    pts = fibonacci_sphere(n)
    return pts, ConvexHull(pts.T).simplices


@pytest.fixture(scope="session")
def tiny():
    return tiny_model()


@pytest.fixture(scope="session")
def tetra():
    return tetrahedron_model()


@pytest.fixture(scope="session")
def face():
    """Mid-size procedural face, fast enough for per-test use."""
    return cached_face_model(1500, 10)


@pytest.fixture(scope="session")
def reference_face():
    """Procedural stand-in at the reference vertex count."""
    return cached_face_model(6704, 30)


@pytest.fixture(scope="session")
def sphere():
    return sphere_mesh(2000)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
