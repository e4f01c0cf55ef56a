"""Collects one verdict line per acceptance criterion for the terminal summary."""
RESULTS: list[tuple[int, str, bool, str]] = []


def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
    RESULTS.append((number, name, ok, detail))
    print(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok
