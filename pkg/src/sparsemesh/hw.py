"""Parameterized hardware abstraction: mesh geometry, core memories,
Memtile scratchpads, DDR channels, and compute throughput.

The defaults describe a 4x4 mesh of tensor cores, 8 banks of 8 KB per core
(6 usable as buffers), one 512 KB Memtile per column (2 MB total), two
4 GBps DDR channels per Memtile, and 256 8-bit MACs per cycle at 1 GHz.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from fractions import Fraction

DDR_KINDS = ("LOAD", "LOADW", "WRITE")
FABRIC_KINDS = ("LOADFM", "LOADWM", "WRITEFM")
INSTR_KINDS = DDR_KINDS + FABRIC_KINDS + ("COMP",)

SHARING_MODES = ("shared", "split")


class HwConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HwConfig:
    mesh_rows: int = 4
    mesh_cols: int = 4
    core_mem_banks: int = 8
    core_bank_bytes: int = 8192
    core_buffer_banks: int = 6
    memtile_count: int = 4            # defaults to one per column
    memtile_bytes: int = 524288
    ddr_channel_gbps: float = 4.0
    memtile_core_gbps: float = 4.0
    macs_per_cycle: int = 256
    clock_ghz: float = 1.0
    memtile_sharing: str = "shared"   # shared | split weights/activations
    ddr_slowdown: float = 1.0
    strict_splits: bool = False       # fail rather than pad uneven splits

    @property
    def core_total_bytes(self) -> int:
        return self.core_mem_banks * self.core_bank_bytes

    @property
    def core_buffer_bytes(self) -> int:
        return self.core_buffer_banks * self.core_bank_bytes

    @property
    def memtile_total_bytes(self) -> int:
        return self.memtile_count * self.memtile_bytes

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def load_config(source=None) -> HwConfig:
    """Build a config from a JSON file path, a dict, or nothing (defaults).

    Missing fields fall back to defaults; the Memtile count follows the
    mesh columns unless set explicitly.
    """
    if source is None:
        doc = {}
    elif isinstance(source, dict):
        doc = dict(source)
    else:
        from pathlib import Path
        text = Path(source).read_text().strip()
        doc = json.loads(text) if text else {}

    if "mesh" in doc:  # accept "mesh": [rows, cols] shorthand
        doc["mesh_rows"], doc["mesh_cols"] = int(doc["mesh"][0]), int(doc["mesh"][1])
        del doc["mesh"]
    known = {f for f in HwConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise HwConfigError(f"unknown hw config fields: {sorted(unknown)}")
    if "memtile_count" not in doc:
        doc["memtile_count"] = int(doc.get("mesh_cols", 4))
    cfg = HwConfig(**doc)
    _validate(cfg)
    return cfg


def _validate(cfg: HwConfig) -> None:
    positive = ("mesh_rows", "mesh_cols", "core_mem_banks", "core_bank_bytes",
                "core_buffer_banks", "memtile_count", "memtile_bytes",
                "ddr_channel_gbps", "memtile_core_gbps", "macs_per_cycle",
                "clock_ghz", "ddr_slowdown")
    for name in positive:
        if getattr(cfg, name) <= 0:
            raise HwConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.core_buffer_banks > cfg.core_mem_banks:
        raise HwConfigError("core_buffer_banks exceeds core_mem_banks")
    if cfg.memtile_sharing not in SHARING_MODES:
        raise HwConfigError(f"memtile_sharing must be one of {SHARING_MODES}")


def bandwidth_for(kind: str, cfg: HwConfig) -> float:
    """Effective GBps for one transfer of the given instruction kind.

    Shared Memtiles dedicate one DDR channel to activations (LOAD) and one
    to weights (LOADW), 4 GBps each in parallel; WRITE uses both (8 GBps).
    Split mode gives loads both channels too.  DDR kinds are divided by the
    ddr_slowdown factor; Memtile-core links are fixed at memtile_core_gbps.
    """
    if kind not in INSTR_KINDS or kind == "COMP":
        raise HwConfigError(f"no bandwidth for kind {kind!r}")
    if kind in FABRIC_KINDS:
        return cfg.memtile_core_gbps
    if kind == "WRITE":
        bw = 2 * cfg.ddr_channel_gbps
    elif cfg.memtile_sharing == "split":
        bw = 2 * cfg.ddr_channel_gbps
    else:
        bw = cfg.ddr_channel_gbps
    return bw / cfg.ddr_slowdown


def bandwidth_fraction(kind: str, cfg: HwConfig) -> Fraction:
    """Exact-rational form of bandwidth_for, for drift-free span arithmetic."""
    if kind in FABRIC_KINDS:
        return Fraction(str(cfg.memtile_core_gbps))
    base = Fraction(str(cfg.ddr_channel_gbps))
    if kind == "WRITE" or cfg.memtile_sharing == "split":
        base *= 2
    return base / Fraction(str(cfg.ddr_slowdown))
