"""Token classes shared by the DSL, the catalog and the execution engine."""

import re

PLACEHOLDER_RE = re.compile(r"[A-Z][A-Z0-9_]*")
VARIABLE_RE = re.compile(r"[a-z][A-Za-z0-9_]*")
REFERENCE_RE = re.compile(r"\$\{([^}]*)\}")


def is_placeholder(name: str) -> bool:
    return PLACEHOLDER_RE.fullmatch(name) is not None


def is_variable(name: str) -> bool:
    return VARIABLE_RE.fullmatch(name) is not None


def references(text: str) -> list[str]:
    """Names referenced as ``${NAME}`` inside ``text``, in order."""
    return REFERENCE_RE.findall(text)
