import pytest

ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number} ({title}): {detail}")


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    """The default synthetic corpus (seed 42) with its features loaded once."""
    from tan2d.synthetic import generate_synthetic_corpus

    root = tmp_path_factory.mktemp("default_corpus")
    man = generate_synthetic_corpus(root, seed=42)
    return man, man.load_features()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
