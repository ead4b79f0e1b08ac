from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from amrgnn.mesh import DomainSpec, RefineCriterion, build_base_mesh, regrid

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def crack_phi(mesh, y=0.25, x_end=0.2, width=0.01):
    p = mesh.positions
    inside = (np.abs(p[:, 1] - y) < width) & (p[:, 0] <= x_end)
    return np.where(inside, 0.0, 1.0)


def refined_mesh(base=8, max_level=2, side=0.5, y=0.25, x_end=0.2, crit=None):
    spec = DomainSpec(side, base, max_level)
    mesh = build_base_mesh(spec)
    crit = crit or RefineCriterion(band_width=spec.side_length / base * 0.5)
    for _ in range(max_level + 1):
        mesh = regrid(mesh, crack_phi(mesh, y, x_end), crit)
    return mesh


@pytest.fixture
def small_mesh():
    return refined_mesh()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
