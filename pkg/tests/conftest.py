import pytest

from prefield.config import from_dict

TINY = {
    "protocol": {"domain": [-60.0, 60.0, -60.0, 60.0], "n_raw": 150, "burn_in": 30, "thin": 3, "n_tracks": 2},
    "study": {"replicate_count": 2, "seed_base": 7, "generation_dims": [21, 21], "lattice_dims": [11, 11]},
    "fit": {"mesh_spacing": 12.0, "margin": 24.0, "max_iter": 20},
    "analysis": {"zone": 43, "scale": 0.0001, "per_track": 20, "replicates": 2},
}

TINY_TOML = """\
[protocol]
domain = [-60.0, 60.0, -60.0, 60.0]
n_raw = 150
burn_in = 30
thin = 3
n_tracks = 2

[study]
replicate_count = 2
seed_base = 7
generation_dims = [21, 21]
lattice_dims = [11, 11]

[fit]
mesh_spacing = 12.0
margin = 24.0
max_iter = 20

[analysis]
zone = 43
scale = 0.0001
per_track = 20
replicates = 2
"""


@pytest.fixture(scope="session")
def tiny_cfg():
    return from_dict(TINY)


@pytest.fixture
def tiny_toml(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY_TOML)
    return p


ACCEPTANCE_LINES: dict = {}


def record_criterion(k: int, ok: bool, detail: str) -> str:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
