import pytest

from seqseg.synthdata import GenConfig, generate_suite

# (criterion number, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def tiny_config(**kw):
    base = dict(dims=(6, 32, 32), radius_range=(2.5, 3.5), elongation_range=(1.5, 2.5),
                distractor_radius=(1.5, 2.5), distractors=2)
    base.update(kw)
    return GenConfig(**base)


@pytest.fixture(scope="session")
def tiny_cases():
    return generate_suite(3, tiny_config(), seed=11)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
