def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criterion pass/fail lines after the test run."""
    try:
        from test_acceptance import _RESULTS
    except Exception:
        return
    if not _RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in _RESULTS:
        terminalreporter.write_line(line)
