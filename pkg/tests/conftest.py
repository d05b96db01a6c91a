import numpy as np
import pytest

from shapeasm.geom import Assembly
from shapeasm.synthetic import box_mesh, generate_shape
from shapeasm.volume import DistanceFieldGrid, TargetShape


def random_quat(rng, n=None):
    q = rng.normal(size=(4,) if n is None else (n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_assembly(rng, m, spread=0.25):
    return Assembly(rng.uniform(0.05, 0.2, size=(m, 3)), random_quat(rng, m),
                    rng.uniform(-spread, spread, size=(m, 3)), np.full(m, 0.9))


def affine_grid(a=(0.3, -0.2, 0.5), b=1.0, res=9, extent=0.6):
    """DF grid holding a positive affine function, so trilinear interpolation is exact."""
    g = DistanceFieldGrid(np.zeros((res,) * 3), np.full(3, -extent), np.full(3, extent))
    g.values = g.nodes() @ np.asarray(a) + b
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cube_target():
    return TargetShape.from_mesh(box_mesh([0.0, 0.0, 0.0], [0.25, 0.25, 0.25]), df_res=33)


@pytest.fixture(scope="session")
def table_shape():
    return generate_shape("table", np.random.default_rng(1))


@pytest.fixture(scope="session")
def table_target(table_shape):
    return TargetShape.from_mesh(table_shape.mesh)


@pytest.fixture
def report(request):
    """Record a criterion's pass/fail line for the end-of-run summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def add(name, ok, detail):
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        return ok
    return add


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
