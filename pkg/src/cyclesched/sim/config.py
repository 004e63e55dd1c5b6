"""Simulator configuration and its JSON form."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import InvalidConfig
from ..placement import PlacementConfig
from ..runtime import SetupCost
from ..statemodel import TransferModel


class Policy(str, enum.Enum):
    ISOLATED = "ISOLATED"
    PACK = "PACK"
    SPREAD = "SPREAD"
    SPREAD_BACKFILL = "SPREAD_BACKFILL"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        key = str(name).upper().replace("-", "_").replace("+", "_")
        try:
            return cls(key)
        except ValueError:
            raise InvalidConfig(f"unknown policy {name!r}") from None


@dataclass(frozen=True)
class SimConfig:
    total_node_groups: int = 1
    horizon: float = 28_800.0
    slot_len: float = 1.0
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    # None derives switch costs from each job's state size and the transfer model
    setup: SetupCost | None = None
    transfer: TransferModel = field(default_factory=TransferModel)
    policy: Policy = Policy.SPREAD
    staleness_steps: int = 1
    duty_ratio_bound: float = 0.5
    seed: int = 0
    cold_start_cycles: int = 0
    preemption: bool = True
    offload_off_critical_path: bool = False
    jitter: float = 0.0

    def __post_init__(self):
        if not isinstance(self.policy, Policy):
            object.__setattr__(self, "policy", Policy.parse(self.policy))
        if not isinstance(self.total_node_groups, int) or self.total_node_groups < 1:
            raise InvalidConfig("total_node_groups must be a positive integer")
        if not (self.horizon > 0 and self.slot_len > 0):
            raise InvalidConfig("horizon and slot_len must be > 0")
        if not 0 < self.duty_ratio_bound <= 1:
            raise InvalidConfig("duty_ratio_bound must lie in (0, 1]")
        if self.staleness_steps < 0 or self.cold_start_cycles < 0:
            raise InvalidConfig("staleness_steps and cold_start_cycles must be >= 0")
        if not 0 <= self.jitter < 1:
            raise InvalidConfig("jitter must lie in [0, 1)")

    def setup_model(self, state_bytes: dict):
        """Flat setup cost, or one derived from the jobs' state sizes."""
        if self.setup is not None:
            return self.setup
        tm = self.transfer

        def derived(resident, incoming) -> SetupCost:
            out = state_bytes.get(resident, 0) / tm.bw_device_host + (tm.fixed_latency if resident else 0.0)
            load = state_bytes.get(incoming, 0) / tm.bw_device_host + tm.fixed_latency
            return SetupCost(0.0 if self.offload_off_critical_path else out, load)

        return derived

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("placement", "transfer"):
                val = asdict(val)
            elif f.name == "setup":
                val = None if val is None else asdict(val)
            elif f.name == "policy":
                val = val.value
            out[f.name] = val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown config fields: {unknown}")
        kw = dict(d)
        try:
            if "placement" in kw:
                kw["placement"] = PlacementConfig(**kw["placement"])
            if "transfer" in kw:
                kw["transfer"] = TransferModel(**kw["transfer"])
            if kw.get("setup") is not None:
                kw["setup"] = SetupCost(**kw["setup"])
            if "policy" in kw:
                kw["policy"] = Policy.parse(kw["policy"])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SimConfig":
        path = Path(path)
        if not path.is_file():
            raise InvalidConfig(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8") or "{}")
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"invalid JSON: {exc.msg}") from None
        return cls.from_dict(data)

    def setup_slots(self, setup_seconds: float) -> int:
        return math.ceil(setup_seconds / self.slot_len - 1e-9)
