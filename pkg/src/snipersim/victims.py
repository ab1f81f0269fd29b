"""Victim programs: prefetching S-Box AES and always-multiply RSA.

A victim run is a *script*: a list of ``(address, cost, label)`` steps. The
machine issues ``address`` at the current cycle and resumes the victim
``cost`` cycles later, so a script's timing is fixed by its profile and not
by where its data happens to be cached.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Optional

from . import aes
from .machine import ACCESS, SLEEP, Machine

LINE = 64
SBOX_LINES = 4

PREFETCH = "P"
LOOKUP = "L"


@dataclass(frozen=True)
class AesTiming:
    """Cycle costs of the S-Box AES victim.

    The defaults give 56-cycle rounds and a 600-cycle encryption. With jitter
    enabled a delay of ``jitter_clamp`` plus a Gaussian term (clamped to
    +/- ``jitter_clamp``) is inserted before ``jitter_round``.
    """

    prefetch_cost: int = 2
    lookup_cost: int = 3
    setup_cost: int = 0
    finish_cost: int = 40
    jitter_sigma: float = 0.0
    jitter_clamp: int = 15
    jitter_round: int = 6

    @property
    def round_cycles(self) -> int:
        return SBOX_LINES * self.prefetch_cost + 16 * self.lookup_cost

    @property
    def nominal_cycles(self) -> int:
        return self.setup_cost + aes.ROUNDS * self.round_cycles + self.finish_cost


@dataclass
class CiphertextRecord:
    run_id: int
    plaintext: bytes
    ciphertext: bytes
    start: int
    end: int
    jitter: int = 0


@dataclass
class AesVictim:
    key: bytes
    sbox_base: int = 0x4000_0000
    table_choice: int = 0
    timing: AesTiming = field(default_factory=AesTiming)

    def __post_init__(self):
        if len(self.key) != 16:
            raise ValueError("AES-128 key must be 16 bytes")
        if not 0 <= self.table_choice < 4:
            raise ValueError("table_choice must be in 0..3")
        if self.sbox_base % LINE:
            raise ValueError("S-Box base must be line aligned")
        self.round_keys = aes.expand_key(self.key)

    @property
    def table_base(self) -> int:
        return self.sbox_base + 256 * self.table_choice

    def line_addr(self, line: int, table: Optional[int] = None) -> int:
        t = self.table_choice if table is None else table
        return self.sbox_base + 256 * t + LINE * line

    @property
    def last_round_key(self) -> bytes:
        return bytes(self.round_keys[aes.ROUNDS])

    def key_digest(self) -> str:
        return hashlib.sha256(self.key).hexdigest()[:16]

    def encrypt_script(self, plaintext: bytes, jitter: int = 0):
        """Return (ciphertext, script) for one encryption."""
        ct, lookups = aes.encrypt_trace(self.round_keys, plaintext)
        tm = self.timing
        base = self.table_base
        script = []
        if tm.setup_cost:
            script.append((None, tm.setup_cost, ("setup",)))
        for r, idx in enumerate(lookups, start=1):
            pre = tm.prefetch_cost
            if r == tm.jitter_round and jitter:
                script.append((None, jitter, ("jitter",)))
            for line in range(SBOX_LINES):
                script.append((base + LINE * line, pre, (r, PREFETCH, line)))
            for j, x in enumerate(idx):
                script.append((base + x, tm.lookup_cost, (r, LOOKUP, j)))
        script.append((None, tm.finish_cost, ("finish",)))
        return ct, script

    def draw_jitter(self, rng: random.Random) -> int:
        tm = self.timing
        if tm.jitter_sigma <= 0:
            return 0
        j = int(round(rng.gauss(0.0, tm.jitter_sigma)))
        return tm.jitter_clamp + max(-tm.jitter_clamp, min(tm.jitter_clamp, j))

    def line_access_offsets(self, plaintext: bytes, line: int, jitter: int = 0):
        """Cycle offsets (from start) at which the script touches ``line``."""
        _, script = self.encrypt_script(plaintext, jitter)
        out = []
        t = 0
        target = self.table_base + LINE * line
        for addr, cost, _lab in script:
            if addr is not None and addr & ~(LINE - 1) == target:
                out.append(t)
            t += cost
        return out

    def step_offset(self, round_no: int, kind: str, index: int, jitter: int = 0) -> int:
        """Start offset of one script step, independent of the plaintext."""
        tm = self.timing
        t = tm.setup_cost + (round_no - 1) * tm.round_cycles
        if round_no >= tm.jitter_round:
            t += jitter
        if kind == PREFETCH:
            return t + index * tm.prefetch_cost
        return t + SBOX_LINES * tm.prefetch_cost + index * tm.lookup_cost


def aes_encrypt_script(victim: AesVictim, plaintext: bytes, jitter: int = 0):
    return victim.encrypt_script(plaintext, jitter)


def aes_last_round_nonaccess_prob(k: int) -> float:
    """Chance a fixed S-Box line is untouched by last-round lookups k..16.

    ``k`` is the 1-based index of the lookup just before which the line is
    evicted.
    """
    if not isinstance(k, int) or not 1 <= k <= 16:
        raise ValueError(f"eviction operation index must be in 1..16, got {k!r}")
    return 0.75 ** (17 - k)


# --------------------------------------------------------------------------
# RSA


@dataclass(frozen=True)
class RsaTiming:
    mul_cycles: int = 9650
    mul_operand_interval: int = 1000
    copy_cycles: int = 75
    copy_accesses: int = 3
    red_cycles: int = 2300
    red_interval: int = 100
    sqr_cycles: int = 9650
    sqr_interval: int = 1000
    jitter_sigma: float = 0.0

    @property
    def period(self) -> int:
        return self.mul_cycles + self.copy_cycles + 2 * self.red_cycles + self.sqr_cycles


@dataclass
class RsaVictim:
    """Access profile of an always-square-always-multiply exponentiation."""

    bits: list  # e_{n-1} .. e_0, most significant first
    r_base: int = 0x5000_0000 + 0x1C0
    code_base: int = 0x6000_0000 + 0x3C0
    timing: RsaTiming = field(default_factory=RsaTiming)

    def __post_init__(self):
        if not self.bits:
            raise ValueError("exponent must be non-empty")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("exponent bits must be 0/1")

    # R[0], R[1], R[2] and the three code lines sit in distinct L3 sets
    def r_addr(self, i: int) -> int:
        return self.r_base + i * 0x2C0

    @property
    def mul_code(self) -> int:
        return self.code_base

    @property
    def red_code(self) -> int:
        return self.code_base + 0x940

    @property
    def sqr_code(self) -> int:
        return self.code_base + 0x1280

    def bit_script(self, e: int, jitter: int = 0, index: int = 0):
        tm = self.timing
        r0, r1, r2, re = self.r_addr(0), self.r_addr(1), self.r_addr(2), self.r_addr(e)
        s = []
        # mul(R[0], R[1], R[e]): both operands are streamed through the multiply
        n_ops = max(1, tm.mul_cycles // tm.mul_operand_interval)
        s.append((self.mul_code, 1, (index, "mul")))
        used = 1
        for k in range(n_ops):
            s.append((r0, 1, (index, "mul_r0")))
            s.append((r1, tm.mul_operand_interval - 1 if k < n_ops - 1 else 1, (index, "mul_r1")))
            used += tm.mul_operand_interval if k < n_ops - 1 else 2
        s.append((None, tm.mul_cycles - used, (index, "mul_tail")))
        # trailing copy touches only the selected result
        step = tm.copy_cycles // tm.copy_accesses
        for k in range(tm.copy_accesses):
            last = k == tm.copy_accesses - 1
            s.append((re, tm.copy_cycles - step * k if last else step, (index, "copy")))
        s.extend(self._reduce(re, index, "red"))
        n_sq = max(1, tm.sqr_cycles // tm.sqr_interval)
        s.append((self.sqr_code, 1, (index, "sqr")))
        used = 1
        for k in range(n_sq):
            c = tm.sqr_interval if k < n_sq - 1 else 1
            s.append((r2, c, (index, "sqr_r2")))
            used += c
        s.append((None, tm.sqr_cycles - used + jitter, (index, "sqr_tail")))
        s.extend(self._reduce(r2, index, "red2"))
        return s

    def _reduce(self, operand: int, index: int, tag: str):
        tm = self.timing
        s = [(self.red_code, 1, (index, tag))]
        n = tm.red_cycles // tm.red_interval
        used = 1
        for k in range(n):
            c = tm.red_interval if k < n - 1 else tm.red_cycles - used
            s.append((operand, c, (index, tag + "_op")))
            used += c
        return s

    def decrypt_script(self, rng: Optional[random.Random] = None):
        script = []
        for i, e in enumerate(self.bits):
            j = 0
            if rng is not None and self.timing.jitter_sigma > 0:
                j = int(round(rng.gauss(0.0, self.timing.jitter_sigma)))
                j = max(-self.timing.sqr_interval // 2, min(self.timing.sqr_interval // 2, j))
            script.extend(self.bit_script(e, j, i))
        return script

    def mul_offset(self) -> int:
        return 0

    def copy_offset(self) -> int:
        return self.timing.mul_cycles

    def red_end_offset(self) -> int:
        return self.timing.mul_cycles + self.timing.copy_cycles + self.timing.red_cycles

    def last_mul_operand_offset(self) -> int:
        tm = self.timing
        n_ops = max(1, tm.mul_cycles // tm.mul_operand_interval)
        return 1 + (n_ops - 1) * tm.mul_operand_interval + 1


def rsa_decrypt_script(victim: RsaVictim, rng: Optional[random.Random] = None):
    return victim.decrypt_script(rng)


def random_exponent(nbits: int, rng: random.Random) -> list:
    bits = [rng.getrandbits(1) for _ in range(nbits)]
    bits[0] = 1
    return bits


# --------------------------------------------------------------------------
# server


@dataclass
class GroundTruth:
    """What the server did, kept for evaluation only."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


@dataclass
class RsaRunRecord:
    run_id: int
    start: int
    end: int
    bit_starts: list
    key_digest: str


def arrival_gaps(n: int, mean_us: float, jitter_us: float, cycles_per_us: int, rng: random.Random):
    for _ in range(n):
        extra = rng.uniform(0.0, jitter_us) if jitter_us > 0 else 0.0
        yield int(round((mean_us + extra) * cycles_per_us))


def aes_server(machine: Machine, victim: AesVictim, truth: GroundTruth, ops: int, rng: random.Random,
               mean_us: float = 500.0, jitter_us: float = 0.0, cycles_per_us: int = 3800,
               first_start: Optional[int] = None):
    """Serve ``ops`` encryption requests at randomized arrival times."""
    t = machine.now
    gaps = arrival_gaps(ops, mean_us, jitter_us, cycles_per_us, rng)
    for i in range(ops):
        gap = next(gaps)
        t = first_start if (i == 0 and first_start is not None) else t + gap
        yield (SLEEP, t)
        pt = bytes(rng.getrandbits(8) for _ in range(16))
        jitter = victim.draw_jitter(rng)
        ct, script = victim.encrypt_script(pt, jitter)
        start = machine.now
        rec = CiphertextRecord(i, pt, ct, start, start)
        truth.records.append(rec)
        for addr, cost, _lab in script:
            if addr is None:
                yield (SLEEP, machine.now + cost)
            else:
                yield (ACCESS, addr, cost)
        rec.end = machine.now
        rec.jitter = jitter
        t = max(t, machine.now)


def rsa_server(machine: Machine, victim: RsaVictim, truth: GroundTruth, ops: int, rng: random.Random,
               mean_us: float = 500.0, jitter_us: float = 0.0, cycles_per_us: int = 3800,
               first_start: Optional[int] = None):
    t = machine.now
    gaps = arrival_gaps(ops, mean_us, jitter_us, cycles_per_us, rng)
    digest = hashlib.sha256(bytes(victim.bits)).hexdigest()[:16]
    for i in range(ops):
        gap = next(gaps)
        t = first_start if (i == 0 and first_start is not None) else t + gap
        yield (SLEEP, t)
        script = victim.decrypt_script(rng)
        rec = RsaRunRecord(i, machine.now, machine.now, [], digest)
        truth.records.append(rec)
        for addr, cost, lab in script:
            if lab[1] == "mul":
                rec.bit_starts.append(machine.now)
            if addr is None:
                yield (SLEEP, machine.now + cost)
            else:
                yield (ACCESS, addr, cost)
        rec.end = machine.now
        t = max(t, machine.now)


def server_process(machine: Machine, victim, truth: GroundTruth, ops: int, rng: random.Random, **kw):
    if isinstance(victim, AesVictim):
        return aes_server(machine, victim, truth, ops, rng, **kw)
    return rsa_server(machine, victim, truth, ops, rng, **kw)
