from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .meter import UNLIMITED, Budget, GasBudget


@dataclass(frozen=True)
class PercentBudget:
    """A budget expressed against the runtime's calibrated capacity."""

    percent: float
    window_us: int = 10_000

    def resolve(self, capacity: int) -> GasBudget:
        return GasBudget.percent(self.percent, capacity, self.window_us)


ManifestBudget = Union[GasBudget, PercentBudget, type(UNLIMITED)]


@dataclass(frozen=True)
class ModuleManifest:
    name: str
    bytecode_path: Path
    allowed_endpoints: tuple[tuple[str, int], ...] = ()
    budget: ManifestBudget = UNLIMITED

    def __post_init__(self) -> None:
        object.__setattr__(self, "bytecode_path", Path(self.bytecode_path))
        eps = []
        for ep in self.allowed_endpoints:
            if isinstance(ep, dict):
                ep = (ep["host"], ep["port"])
            host, port = ep
            if not 0 <= int(port) <= 0xFFFF:
                raise ValueError(f"port {port} does not fit u16")
            eps.append((str(host), int(port)))
        object.__setattr__(self, "allowed_endpoints", tuple(eps))

    def allows(self, host: str, port: int) -> bool:
        return (host, port) in self.allowed_endpoints

    def allows_port(self, port: int) -> list[str]:
        return [h for h, p in self.allowed_endpoints if p == port]

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ModuleManifest":
        path = Path(d["bytecode_path"])
        if base is not None and not path.is_absolute():
            path = base / path
        return cls(
            name=d["name"],
            bytecode_path=path,
            allowed_endpoints=tuple(d.get("allowed_endpoints", ())),
            budget=parse_budget(d.get("budget", "unlimited")),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ModuleManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base=path.parent)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bytecode_path": str(self.bytecode_path),
            "allowed_endpoints": [{"host": h, "port": p} for h, p in self.allowed_endpoints],
            "budget": dump_budget(self.budget),
        }


def parse_budget(raw) -> ManifestBudget:
    if raw == "unlimited" or raw is None:
        return UNLIMITED
    if isinstance(raw, dict):
        window_us = int(raw.get("window_us", 10_000))
        if "percent" in raw:
            return PercentBudget(float(raw["percent"]), window_us)
        return GasBudget(int(raw["instructions_per_window"]), window_us)
    raise ValueError(f"unrecognised budget {raw!r}")


def dump_budget(budget: ManifestBudget):
    if budget is UNLIMITED:
        return "unlimited"
    if isinstance(budget, PercentBudget):
        return {"percent": budget.percent, "window_us": budget.window_us}
    return {"instructions_per_window": budget.instructions_per_window, "window_us": budget.window_us}


def resolve_budget(budget: ManifestBudget, capacity: int | None) -> Budget:
    if isinstance(budget, PercentBudget):
        if capacity is None:
            raise ValueError("percent budgets need a calibrated capacity")
        return budget.resolve(capacity)
    return budget
