"""Shared pytest wiring.

After the run, every test from test_acceptance.py gets one summary line
(PASS/FAIL plus the measurements it recorded), so the gate's verdict is
readable at a glance without digging through the node list.
"""

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome, label in (("passed", "PASS"), ("failed", "FAIL"),
                           ("error", "FAIL")):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if ACCEPTANCE_FILE not in nodeid:
                continue
            if label == "PASS" and getattr(rep, "when", "call") != "call":
                continue
            name = nodeid.split("::")[-1]
            detail = ""
            for key, value in getattr(rep, "user_properties", []) or []:
                if key == "detail":
                    detail = str(value)
            # a FAIL in any phase overrides an earlier PASS for the same test
            if rows.get(name, ("", ""))[0] != "FAIL":
                rows[name] = (label, detail)
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance summary")
    for name in sorted(rows):
        label, detail = rows[name]
        line = f"{label}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
