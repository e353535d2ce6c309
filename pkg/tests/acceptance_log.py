"""One PASS/FAIL line per acceptance criterion, echoed at the end of the pytest run."""

import sys

LINES = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    LINES.append(line)
    print(line, file=sys.stderr)
    return ok
