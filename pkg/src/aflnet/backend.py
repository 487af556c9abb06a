"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  Set ``AFLNET_BACKEND=python`` to force the fallback.
Both backends produce bit-identical results.
"""
from __future__ import annotations

import os
from types import ModuleType

from aflnet import _fallback


def _load_compiled() -> ModuleType | None:
    try:
        from aflnet import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()


def available() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names


def get(name: str) -> ModuleType:
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    if name == "python":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")


def _select() -> tuple[str, ModuleType]:
    wanted = os.environ.get("AFLNET_BACKEND", "").strip().lower()
    if wanted:
        return wanted, get(wanted)
    if _compiled is not None:
        return "compiled", _compiled
    return "python", _fallback


NAME, kernels = _select()


def use(name: str) -> None:
    """Switch the active backend for the rest of the process."""
    global NAME, kernels
    kernels = get(name)
    NAME = name
