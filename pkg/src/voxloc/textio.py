"""Full-precision numeric formatting for structured-text outputs."""


def fnum(x) -> str:
    """Shortest decimal that round-trips the value as a Python float."""
    return repr(float(x))
