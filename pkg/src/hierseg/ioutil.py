"""Byte-stable JSON read/write helpers shared across the package."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any


def json_dumps(obj: Any) -> str:
    """Serialize with sorted keys, two-space indent and a trailing newline.

    Floats go through repr, so values round-trip exactly and the same
    object always produces the same bytes.
    """
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json_dumps(obj), encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
