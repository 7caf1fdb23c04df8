import sys
import json

import numpy as np
import pytest

from kgret.synthkg import NoiseRates, SynthSpec, generate


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


@pytest.fixture
def icd_records():
    return [
        {"id": "R52", "title_concat": "Pain", "code_desc": "R52 Pain, unspecified",
         "see_also": None, "parent": None},
        {"id": "R07.9", "title_concat": "Chest Pain", "code_desc": "R07.9 Chest pain, unspecified",
         "see_also": "Pain, chest", "parent": "R52"},
    ]


@pytest.fixture
def icd_file(tmp_path, icd_records):
    return write_jsonl(tmp_path / "icd.jsonl", icd_records)


@pytest.fixture(scope="session")
def synth_small():
    return generate(SynthSpec(n_concepts=60, synonyms_per_concept=(2, 4), edge_density=0.05, seed=3))


@pytest.fixture(scope="session")
def synth_500():
    return generate(SynthSpec(n_concepts=500, synonyms_per_concept=(2, 5), edge_density=0.01,
                              surface_noise=NoiseRates(acronym_rate=0.3), seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
