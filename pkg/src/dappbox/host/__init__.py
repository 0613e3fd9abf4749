"""Sandbox runtime: bytecode metering, windowed budgets and capability-scoped sockets.

Names are resolved lazily so that ``dappbox.host.sockets`` and friends can be
used (for instance by the native dApp arm) without loading the wasm engine.
"""

import importlib

_EXPORTS = {
    "InvalidBytecode": "instrument",
    "ModuleManifest": "manifest",
    "PercentBudget": "manifest",
    "EPSILON": "meter",
    "UNLIMITED": "meter",
    "GasBudget": "meter",
    "UnknownWindow": "meter",
    "WindowUsage": "meter",
    "CalibrationTooShort": "runtime",
    "ForbiddenImport": "runtime",
    "InstanceHandle": "runtime",
    "InstanceState": "runtime",
    "ResourceExhausted": "runtime",
    "Runtime": "runtime",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
