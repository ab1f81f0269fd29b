"""Inclusive three-level cache hierarchy.

L1 and L2 are private per core and use a tree pseudo-LRU policy. The L3 is
shared, inclusive of every private cache, and uses a quad-age policy:
every line carries a 2-bit age, the victim is the lowest way holding age 3,
and when no line is at age 3 all ages are raised together until one is.

Lines are identified by their line number (``addr >> 6``); a set stores
line numbers directly, which is equivalent to storing tags because the set
index is implied by the set the line lives in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

LINE_SIZE = 64
LINE_BITS = 6


class Level(IntEnum):
    L1 = 1
    L2 = 2
    L3 = 3
    MEM = 4


@dataclass(frozen=True)
class LevelGeometry:
    ways: int
    sets: int
    latency: int

    def __post_init__(self):
        if self.ways < 1:
            raise ValueError(f"ways must be >= 1, got {self.ways}")
        if self.sets < 1 or self.sets & (self.sets - 1):
            raise ValueError(f"sets must be a power of two, got {self.sets}")

    @property
    def lines(self) -> int:
        return self.ways * self.sets


@dataclass(frozen=True)
class CacheGeometry:
    """Sizes and latencies for the whole hierarchy.

    Defaults follow a Kaby Lake client part: 32 KiB 8-way L1, 256 KiB 4-way
    L2, one 768 KiB 12-way LLC slice.
    """

    l1: LevelGeometry = LevelGeometry(ways=8, sets=64, latency=4)
    l2: LevelGeometry = LevelGeometry(ways=4, sets=1024, latency=12)
    l3: LevelGeometry = LevelGeometry(ways=12, sets=1024, latency=40)
    mem_latency: int = 200
    cores: int = 3
    line_size: int = LINE_SIZE

    def __post_init__(self):
        if self.line_size != LINE_SIZE:
            raise ValueError("line_size is fixed at 64 bytes")
        if not (self.l3.lines >= self.l2.lines >= self.l1.lines):
            raise ValueError("inclusive hierarchy needs L3 >= L2 >= L1 capacity")
        for g in (self.l1, self.l2):
            if g.ways & (g.ways - 1):
                raise ValueError("tree PLRU needs a power-of-two way count")
        if self.cores < 1:
            raise ValueError("need at least one core")

    def latency(self, level: Level) -> int:
        if level == Level.L1:
            return self.l1.latency
        if level == Level.L2:
            return self.l2.latency
        if level == Level.L3:
            return self.l3.latency
        return self.mem_latency

    def with_l3_ways(self, ways: int) -> "CacheGeometry":
        return CacheGeometry(
            l1=self.l1,
            l2=self.l2,
            l3=LevelGeometry(ways, self.l3.sets, self.l3.latency),
            mem_latency=self.mem_latency,
            cores=self.cores,
        )


@dataclass(frozen=True)
class PhysicalAddress:
    tag: int
    set_index: int
    offset: int


def decompose(addr: int, level: LevelGeometry) -> PhysicalAddress:
    line = addr >> LINE_BITS
    return PhysicalAddress(
        tag=line // level.sets, set_index=line & (level.sets - 1), offset=addr & (LINE_SIZE - 1)
    )


def compose(pa: PhysicalAddress, level: LevelGeometry) -> int:
    return ((pa.tag * level.sets + pa.set_index) << LINE_BITS) | pa.offset


class AccessOutcome:
    __slots__ = ("level", "evicted_l3_line", "cost", "line")

    def __init__(self, level: Level, cost: int, line: int, evicted_l3_line: Optional[int] = None):
        self.level = level
        self.cost = cost
        self.line = line
        self.evicted_l3_line = evicted_l3_line

    def __repr__(self):
        ev = f", evicted={self.evicted_l3_line:#x}" if self.evicted_l3_line is not None else ""
        return f"AccessOutcome({self.level.name}, cost={self.cost}{ev})"

    @property
    def hit(self) -> bool:
        return self.level != Level.MEM


# --------------------------------------------------------------------------
# tree PLRU


class PlruSet:
    """One set under tree pseudo-LRU.

    ``bits`` is a heap-ordered array: node 1 is the root, node n has
    children 2n and 2n+1, and leaf way i sits at index ways + i. A bit of 0
    points to the left child, 1 to the right child.
    """

    __slots__ = ("ways", "lines", "bits", "where")

    def __init__(self, ways: int):
        self.ways = ways
        self.lines: list[Optional[int]] = [None] * ways
        self.bits = [0] * ways  # index 0 unused
        self.where: dict[int, int] = {}

    def touch(self, way: int) -> None:
        node = way + self.ways
        bits = self.bits
        while node > 1:
            parent = node >> 1
            # point away from the child we came from
            bits[parent] = 1 if not node & 1 else 0
            node = parent

    def select_victim(self) -> int:
        if len(self.where) < self.ways:
            return self.lines.index(None)
        node = 1
        bits = self.bits
        while node < self.ways:
            node = 2 * node + bits[node]
        return node - self.ways

    def insert(self, line: int) -> Optional[int]:
        """Install ``line``; return the line it displaced, if any."""
        way = self.select_victim()
        old = self.lines[way]
        if old is not None:
            del self.where[old]
        self.lines[way] = line
        self.where[line] = way
        self.touch(way)
        return old

    def invalidate(self, line: int) -> bool:
        way = self.where.pop(line, None)
        if way is None:
            return False
        self.lines[way] = None
        return True

    def snapshot(self):
        return (tuple(self.lines), tuple(self.bits))


def plru_select_victim(tree: PlruSet) -> int:
    return tree.select_victim()


def plru_touch(tree: PlruSet, way: int) -> None:
    if not 0 <= way < tree.ways:
        raise IndexError(way)
    tree.touch(way)


# --------------------------------------------------------------------------
# quad-age L3 set

INSERT_AGE = 2
MAX_AGE = 3


class QuadAgeSet:
    __slots__ = ("ways", "lines", "ages", "where", "insert_age")

    def __init__(self, ways: int, insert_age: int = INSERT_AGE):
        self.ways = ways
        self.lines: list[Optional[int]] = [None] * ways
        self.ages = [0] * ways
        self.where: dict[int, int] = {}
        self.insert_age = insert_age

    def hit(self, way: int) -> None:
        # a hit promotes the line by one age step
        if self.ages[way]:
            self.ages[way] -= 1

    def select_victim(self) -> int:
        """Pick the way to evict from a full set, aging the set if needed."""
        ages = self.ages
        top = max(ages)
        if top < MAX_AGE:
            bump = MAX_AGE - top
            for i in range(self.ways):
                ages[i] = min(MAX_AGE, ages[i] + bump)
        return ages.index(MAX_AGE)

    def free_way(self) -> Optional[int]:
        if len(self.where) < self.ways:
            return self.lines.index(None)
        return None

    def insert(self, line: int) -> Optional[int]:
        way = self.free_way()
        old = None
        if way is None:
            way = self.select_victim()
            old = self.lines[way]
            del self.where[old]
        self.install(line, way)
        return old

    def install(self, line: int, way: int) -> None:
        self.lines[way] = line
        self.ages[way] = self.insert_age
        self.where[line] = way

    def invalidate(self, line: int) -> bool:
        way = self.where.pop(line, None)
        if way is None:
            return False
        self.lines[way] = None
        self.ages[way] = 0
        return True

    def valid_ages(self) -> list[Optional[int]]:
        return [a if l is not None else None for l, a in zip(self.lines, self.ages)]

    def snapshot(self):
        return (tuple(self.lines), tuple(self.valid_ages()))


def l3_select_victim(s: QuadAgeSet) -> int:
    if s.free_way() is not None:
        raise ValueError("set has a free way; no victim selection needed")
    return s.select_victim()


def l3_insert(s: QuadAgeSet, line: int, way: int) -> None:
    old = s.lines[way]
    if old is not None:
        del s.where[old]
    s.install(line, way)


# --------------------------------------------------------------------------
# hierarchy


class PrivateCache:
    """A lazily-populated PLRU cache level."""

    __slots__ = ("geom", "sets", "mask")

    def __init__(self, geom: LevelGeometry):
        self.geom = geom
        self.sets: dict[int, PlruSet] = {}
        self.mask = geom.sets - 1

    def get(self, line: int) -> PlruSet:
        idx = line & self.mask
        s = self.sets.get(idx)
        if s is None:
            s = self.sets[idx] = PlruSet(self.geom.ways)
        return s

    def peek(self, line: int) -> Optional[PlruSet]:
        return self.sets.get(line & self.mask)

    def contains(self, line: int) -> bool:
        s = self.sets.get(line & self.mask)
        return s is not None and line in s.where


@dataclass
class HierarchyState:
    geometry: CacheGeometry = field(default_factory=CacheGeometry)
    insert_age: int = INSERT_AGE

    def __post_init__(self):
        g = self.geometry
        self.l1 = [PrivateCache(g.l1) for _ in range(g.cores)]
        self.l2 = [PrivateCache(g.l2) for _ in range(g.cores)]
        self.l3: dict[int, QuadAgeSet] = {}
        self._l3_mask = g.l3.sets - 1
        self._lat = {lv: g.latency(lv) for lv in Level}

    # -- helpers

    def l3_set(self, set_index: int) -> QuadAgeSet:
        s = self.l3.get(set_index)
        if s is None:
            s = self.l3[set_index] = QuadAgeSet(self.geometry.l3.ways, self.insert_age)
        return s

    def l3_index(self, addr: int) -> int:
        return (addr >> LINE_BITS) & self._l3_mask

    def in_l3(self, addr: int) -> bool:
        line = addr >> LINE_BITS
        s = self.l3.get(line & self._l3_mask)
        return s is not None and line in s.where

    def in_private(self, addr: int, core: int) -> Optional[Level]:
        line = addr >> LINE_BITS
        if self.l1[core].contains(line):
            return Level.L1
        if self.l2[core].contains(line):
            return Level.L2
        return None

    def peek(self, addr: int, core: int = 0) -> Level:
        """Level an access would be served from, without changing state."""
        lv = self.in_private(addr, core)
        if lv is not None:
            return lv
        return Level.L3 if self.in_l3(addr) else Level.MEM

    def l3_age(self, addr: int) -> Optional[int]:
        line = addr >> LINE_BITS
        s = self.l3.get(line & self._l3_mask)
        if s is None or line not in s.where:
            return None
        return s.ages[s.where[line]]

    # -- operations

    def access(self, addr: int, core: int = 0) -> AccessOutcome:
        line = addr >> LINE_BITS
        l1 = self.l1[core].get(line)
        way = l1.where.get(line)
        if way is not None:
            l1.touch(way)
            return AccessOutcome(Level.L1, self._lat[Level.L1], line)

        l2 = self.l2[core].get(line)
        way = l2.where.get(line)
        if way is not None:
            l2.touch(way)
            l1.insert(line)
            return AccessOutcome(Level.L2, self._lat[Level.L2], line)

        s3 = self.l3_set(line & self._l3_mask)
        way = s3.where.get(line)
        if way is not None:
            s3.hit(way)
            l2.insert(line)
            l1.insert(line)
            return AccessOutcome(Level.L3, self._lat[Level.L3], line)

        evicted = s3.insert(line)
        if evicted is not None:
            self._back_invalidate(evicted)
        l2.insert(line)
        l1.insert(line)
        return AccessOutcome(Level.MEM, self._lat[Level.MEM], line, evicted)

    def _back_invalidate(self, line: int) -> None:
        for c in self.l1:
            s = c.peek(line)
            if s is not None:
                s.invalidate(line)
        for c in self.l2:
            s = c.peek(line)
            if s is not None:
                s.invalidate(line)

    def flush(self, addr: int) -> bool:
        """Invalidate the line everywhere. Returns whether it was cached."""
        line = addr >> LINE_BITS
        s3 = self.l3.get(line & self._l3_mask)
        was = s3 is not None and s3.invalidate(line)
        for c in self.l1 + self.l2:
            s = c.peek(line)
            if s is not None and s.invalidate(line):
                was = True
        return was

    # -- inspection

    def snapshot(self):
        """Hashable, order-independent image of every valid line and its metadata."""
        def private(caches):
            return tuple(
                tuple(sorted((k, s.snapshot()) for k, s in c.sets.items() if s.where))
                for c in caches
            )

        l3 = tuple(sorted((k, s.snapshot()) for k, s in self.l3.items() if s.where))
        return (private(self.l1), private(self.l2), l3)

    def l3_ages_snapshot(self):
        return tuple(sorted((k, tuple(s.lines), tuple(s.ages)) for k, s in self.l3.items()))

    def inclusivity_violations(self) -> list[tuple[int, int]]:
        """(core, line) pairs held privately but missing from L3."""
        bad = []
        for caches in (self.l1, self.l2):
            for core, c in enumerate(caches):
                for s in c.sets.values():
                    for line in s.where:
                        s3 = self.l3.get(line & self._l3_mask)
                        if s3 is None or line not in s3.where:
                            bad.append((core, line))
        return bad
