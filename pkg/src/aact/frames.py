"""CAN frame text (``ID#PAYLOAD``) parsing and normalization."""

from __future__ import annotations

import re
from dataclasses import dataclass

_FRAME_RE = re.compile(r"^([0-9A-Fa-f]{1,8})#([0-9A-Fa-f]{0,16})$")


class FrameError(ValueError):
    """Raised for text that is not a valid CAN frame."""


@dataclass(frozen=True)
class CanFrame:
    can_id: str
    data: bytes

    def __str__(self) -> str:
        return f"{self.can_id}#{self.data.hex().upper()}"


def parse_frame(text: str) -> CanFrame:
    """Parse frame text; dots are grouping only and are stripped."""
    raw = text.strip().replace(".", "")
    m = _FRAME_RE.match(raw)
    if not m or len(m.group(2)) % 2:
        raise FrameError(f"invalid CAN frame text: {text!r}")
    return CanFrame(m.group(1).upper(), bytes.fromhex(m.group(2)))


def normalize_frame(text: str) -> str:
    return str(parse_frame(text))


def is_frame(text: str) -> bool:
    try:
        parse_frame(text)
    except FrameError:
        return False
    return True
