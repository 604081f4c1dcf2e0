import json

import numpy as np
import pytest

from polyrec.dataset import SyntheticSpec, generate_synthetic

ACCEPTANCE = {}


def record_acceptance(key, passed, detail):
    ACCEPTANCE[key] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>4} {'PASS' if passed else 'FAIL'}  {detail}")


def small_spec(n=300, lang_dim=6, graph_dim=5, noise=0.1, missing=(0.0, 0.3, 0.3), seed=0,
               offsets=(5.0, 5.0, 5.0)):
    w = np.random.default_rng(seed + 100).standard_normal((lang_dim + graph_dim, 3)) * 0.5
    return SyntheticSpec(n, noise, missing, w, seed=seed, offsets=offsets,
                         lang_dim=lang_dim, graph_dim=graph_dim)


@pytest.fixture
def small_data():
    return generate_synthetic(small_spec()).dataset


@pytest.fixture
def write_manifest_lines(tmp_path):
    def _write(rows, name="manifest.jsonl"):
        path = tmp_path / name
        with open(path, "w") as fh:
            for row in rows:
                fh.write(row if isinstance(row, str) else json.dumps(row))
                fh.write("\n")
        return path
    return _write
