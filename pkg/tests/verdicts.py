"""Collects one PASS/FAIL line per acceptance criterion for the summary."""

LINES = []


def verdict(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    LINES.append(line)
    print(line)
    return ok
