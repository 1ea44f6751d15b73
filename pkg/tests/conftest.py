from hypothesis import settings

# training-heavy property tests run on a shared CPU; wall-clock deadlines
# would only add noise
settings.register_profile("rotcloud", deadline=None)
settings.load_profile("rotcloud")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
