import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(label, passed, detail)`` records one summary line."""
    results = request.config.stash[_ACCEPTANCE_KEY]

    def record(label, passed, detail=""):
        results[label] = (passed, detail)
        print(f"{label} {'PASS' if passed is True else 'FAIL' if passed is False else 'INFO'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_ACCEPTANCE_KEY]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    def order(label):
        head = label.split(".")[0]
        return (int(head[1:]) if head[1:].isdigit() else 99, label)

    for label in sorted(results, key=order):
        passed, detail = results[label]
        status = "PASS" if passed is True else "FAIL" if passed is False else "INFO"
        terminalreporter.write_line(f"{label:<6s} {status}  {detail}")
