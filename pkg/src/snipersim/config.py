"""Flat ``key = value`` scenario files.

Parsing goes through :mod:`configparser` with an implicit section, so ``#``
and ``;`` comments work. Every key must be a known field; all problems are
collected and reported together.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .cache_model import CacheGeometry, LevelGeometry


class ConfigError(ValueError):
    code = "CONFIG_INVALID"

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("CONFIG_INVALID\n" + "\n".join(f"  {p}" for p in problems))


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    victim: str = "aes"  # aes | rsa
    seed: int = 1

    # geometry
    l1_ways: int = 8
    l1_sets: int = 64
    l1_latency: int = 4
    l2_ways: int = 4
    l2_sets: int = 1024
    l2_latency: int = 12
    l3_ways: int = 12
    l3_sets: int = 1024
    l3_latency: int = 40
    mem_latency: int = 200
    cores: int = 3
    insert_age: int = 2

    # victim
    key: str = "random"  # 32 hex chars, or "random" (drawn from key_seed)
    key_seed: int = 7
    table_choice: int = 0
    aes_jitter_sigma: float = 0.0
    exponent_bits: int = 2048
    rsa_jitter_sigma: float = 0.0

    # arrivals
    arrival_mean_us: float = 500.0
    arrival_jitter_us: float = 0.0
    cycles_per_us: int = 3800

    # machine
    abort_delivery_latency: int = 180
    spontaneous_abort_rate: float = 0.0
    noise_rate_per_set: float = 0.0  # background accesses per cycle per monitored set
    detection_noise_rate: float = -1.0  # per cycle in the detection set; -1 means same as above

    # attack
    detection: str = "tsx"  # tsx | flush_reload
    shoot: str = "method1"  # method1 | method2
    wait_time: str = "auto"  # auto (stakeout) or cycles
    monitored_line: int = 0
    adaptive: bool = False
    target_miss_rate: float = 0.07
    adapt_window: int = 10_000
    adapt_down: float = 0.02
    adapt_up: int = 10
    wait_limit: int = 20
    fr_iter_cycles: int = 20
    fr_flush_settle: int = 165
    shared_memory: bool = True

    # budget / recovery
    samples: int = 200_000  # AES: max detected samples; RSA: decryptions (traces)
    stop_when_recovered: bool = True
    noisy_recovery: bool = False

    # output
    output_dir: str = "out"
    trace_limit: int = 200_000

    def geometry(self) -> CacheGeometry:
        return CacheGeometry(
            l1=LevelGeometry(self.l1_ways, self.l1_sets, self.l1_latency),
            l2=LevelGeometry(self.l2_ways, self.l2_sets, self.l2_latency),
            l3=LevelGeometry(self.l3_ways, self.l3_sets, self.l3_latency),
            mem_latency=self.mem_latency,
            cores=self.cores,
        )

    def replace(self, **kw) -> "ScenarioConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []

        def need(cond, fld, msg):
            if not cond:
                problems.append(f"{fld}: {msg}")

        need(self.victim in ("aes", "rsa"), "victim", f"must be aes or rsa, got {self.victim!r}")
        need(self.detection in ("tsx", "flush_reload"), "detection", f"must be tsx or flush_reload, got {self.detection!r}")
        need(self.shoot in ("method1", "method2"), "shoot", f"must be method1 or method2, got {self.shoot!r}")
        if self.key != "random":
            try:
                need(len(bytes.fromhex(self.key)) == 16, "key", "must be 32 hex characters or 'random'")
            except ValueError:
                problems.append("key: not valid hex")
        need(0 <= self.table_choice < 4, "table_choice", "must be 0..3")
        need(0 <= self.monitored_line < 4, "monitored_line", "must be 0..3")
        need(self.exponent_bits >= 1, "exponent_bits", "must be >= 1")
        need(self.samples >= 1, "samples", "must be >= 1")
        need(self.arrival_mean_us > 0, "arrival_mean_us", "must be > 0")
        need(self.arrival_jitter_us >= 0, "arrival_jitter_us", "must be >= 0")
        need(self.cycles_per_us > 0, "cycles_per_us", "must be > 0")
        need(self.spontaneous_abort_rate >= 0, "spontaneous_abort_rate", "must be >= 0")
        need(self.noise_rate_per_set >= 0, "noise_rate_per_set", "must be >= 0")
        need(self.abort_delivery_latency >= 0, "abort_delivery_latency", "must be >= 0")
        need(0 < self.target_miss_rate < 1, "target_miss_rate", "must be in (0, 1)")
        need(self.adapt_window >= 1, "adapt_window", "must be >= 1")
        need(self.wait_limit >= 0, "wait_limit", "must be >= 0")
        need(self.insert_age in (0, 1, 2, 3), "insert_age", "must be 0..3")
        need(self.trace_limit >= 0, "trace_limit", "must be >= 0")
        if self.wait_time != "auto":
            try:
                need(int(self.wait_time) >= 0, "wait_time", "must be >= 0")
            except ValueError:
                problems.append(f"wait_time: must be 'auto' or an integer, got {self.wait_time!r}")
        if self.shoot == "method1":
            need(self.shared_memory, "shoot", "method1 needs shared_memory = true")
        try:
            self.geometry()
        except ValueError as e:
            problems.append(f"geometry: {e}")
        if problems:
            raise ConfigError(problems)


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, problems: list[str]):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if ftype == "int":
            return int(raw.replace("_", ""), 0)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as e:
        problems.append(f"{name}: {e}")
        return None


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[scenario]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError([f"syntax: {e}"]) from None
    problems: list[str] = []
    values = {}
    for k, v in cp["scenario"].items():
        if k not in _FIELDS:
            problems.append(f"{k}: unknown key")
            continue
        val = _coerce(k, v, problems)
        if val is not None:
            values[k] = val
    cfg = ScenarioConfig(**values)
    try:
        cfg.validate()
    except ConfigError as e:
        problems += e.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_config(cfg: ScenarioConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("snipersim.presets").iterdir() if p.name.endswith(".cfg"))


def load_config(spec: str) -> ScenarioConfig:
    """Load a config file, or a bundled preset by name."""
    path = Path(spec)
    if path.is_file():
        return parse_config(path.read_text(), str(path))
    name = spec[:-4] if spec.endswith(".cfg") else spec
    res = resources.files("snipersim.presets") / f"{name}.cfg"
    if res.is_file():
        return parse_config(res.read_text(), f"preset:{name}")
    raise ConfigError([f"config: no such file or preset {spec!r} (presets: {', '.join(preset_names())})"])
