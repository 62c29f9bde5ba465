"""Grouped binary pruning masks over a :class:`ReferenceNet` parameter vector.

A mask bit switches a whole group of parameters on or off.  Three groupings
are supported:

``per_parameter``
    one bit per parameter;
``per_neuron``
    one bit per non-input neuron, covering its incoming weights and bias;
``chunks``
    each layer's neurons split into ``n`` contiguous chunks, one bit each.

For the neuron-based groupings a switched-off neuron outputs exactly zero,
so its outgoing weights are dropped when the mask is expanded.  For
``per_parameter`` the same effect is enforced on the bits themselves by
:func:`repair`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .network import Architecture

GRANULARITIES = ("per_parameter", "per_neuron", "chunks")
DEFAULT_MIN_ACTIVE = 0.125


class GroupingError(ValueError):
    pass


class GroupingMap:
    """Partition of the parameter vector into mask groups.

    Groups are numbered layer by layer, so layer ``l`` owns the contiguous
    bit range ``layer_ranges[l]``.
    """

    def __init__(self, arch: Architecture, granularity: str = "per_neuron", n_chunks: int | None = None):
        if granularity not in GRANULARITIES:
            raise GroupingError(f"unknown granularity {granularity!r}")
        if granularity == "chunks":
            if n_chunks is None or n_chunks < 1:
                raise GroupingError("chunks grouping needs n >= 1")
            smallest = min(arch.layer_sizes[1:])
            if n_chunks > smallest:
                raise GroupingError(
                    f"degenerate grouping: {n_chunks} chunks but a layer has only {smallest} neurons"
                )
        else:
            n_chunks = None
        self.arch = arch
        self.granularity = granularity
        self.n_chunks = n_chunks

        param_group = np.empty(arch.n_params, dtype=np.intp)
        neuron_group: list[np.ndarray] = []
        layer_ranges: list[tuple[int, int]] = []
        next_group = 0
        for layer, (start, stop) in enumerate(arch.layer_offsets()):
            fan_out, width = arch.layer_shape(layer)
            if granularity == "per_parameter":
                groups_here = stop - start
                param_group[start:stop] = np.arange(next_group, next_group + groups_here)
                neuron_group.append(np.empty(0, dtype=np.intp))
            else:
                if granularity == "per_neuron":
                    owner = np.arange(fan_out)
                else:
                    owner = np.empty(fan_out, dtype=np.intp)
                    for c, part in enumerate(np.array_split(np.arange(fan_out), n_chunks)):
                        owner[part] = c
                groups_here = int(owner.max()) + 1
                owner = owner + next_group
                neuron_group.append(owner)
                param_group[start:stop] = np.repeat(owner, width)
            layer_ranges.append((next_group, next_group + groups_here))
            next_group += groups_here

        self.param_group = param_group
        self.param_group.setflags(write=False)
        self.neuron_group = neuron_group
        self.layer_ranges = layer_ranges
        self.group_sizes = np.bincount(param_group, minlength=next_group)
        self.group_layer = np.concatenate(
            [np.full(b - a, layer, dtype=np.intp) for layer, (a, b) in enumerate(layer_ranges)]
        )

    @property
    def n_bits(self) -> int:
        return len(self.group_sizes)

    @property
    def layer_group_counts(self) -> list[int]:
        return [b - a for a, b in self.layer_ranges]

    def group_indices(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.param_group == group)

    def min_active(self, fraction: float) -> list[int]:
        return [max(1, math.ceil(fraction * g - 1e-12)) for g in self.layer_group_counts]

    def spec(self) -> dict:
        return {"arch": self.arch.to_dict(), "granularity": self.granularity, "n_chunks": self.n_chunks}

    @classmethod
    def from_spec(cls, spec: dict) -> "GroupingMap":
        return cls(Architecture.from_dict(spec["arch"]), spec["granularity"], spec.get("n_chunks"))

    def _key(self):
        return (self.arch, self.granularity, self.n_chunks)

    def __eq__(self, other):
        return isinstance(other, GroupingMap) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        extra = f", n_chunks={self.n_chunks}" if self.n_chunks else ""
        return f"GroupingMap({list(self.arch.layer_sizes)}, {self.granularity!r}{extra}, D={self.n_bits})"


def build_grouping(arch: Architecture, granularity: str = "per_neuron", n_chunks: int | None = None) -> GroupingMap:
    return GroupingMap(arch, granularity, n_chunks)


@dataclass(frozen=True, eq=False)
class GroupedMask:
    bits: np.ndarray
    grouping: GroupingMap

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.shape != (self.grouping.n_bits,):
            raise GroupingError(f"mask has {b.shape} bits, grouping expects ({self.grouping.n_bits},)")
        if not np.isin(b, (0, 1)).all():
            raise GroupingError("mask bits must be 0 or 1")
        b = b.astype(np.uint8)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def ones(cls, grouping: GroupingMap) -> "GroupedMask":
        return cls(np.ones(grouping.n_bits, dtype=np.uint8), grouping)

    def __eq__(self, other):
        return (isinstance(other, GroupedMask) and self.grouping == other.grouping
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.grouping, self.bits.tobytes()))

    @property
    def l1(self) -> int:
        return int(self.bits.sum())

    @cached_property
    def _expanded(self) -> np.ndarray:
        g = self.grouping
        keep = self.bits[g.param_group].astype(bool)
        if g.granularity != "per_parameter":
            arch = g.arch
            for layer, (start, stop) in enumerate(arch.layer_offsets()):
                if layer == 0:
                    continue
                source_alive = self.bits[g.neuron_group[layer - 1]].astype(bool)
                block = keep[start:stop].reshape(arch.layer_shape(layer))
                block[:, :-1] &= source_alive[None, :]
        keep.setflags(write=False)
        return keep

    def expand(self) -> np.ndarray:
        """Boolean keep-vector at parameter resolution (read-only)."""
        return self._expanded

    @property
    def retained_parameter_count(self) -> int:
        return int(self._expanded.sum())

    def to_hex(self) -> str:
        return f"{self.grouping.n_bits}:" + np.packbits(self.bits).tobytes().hex()

    @classmethod
    def from_hex(cls, text: str, grouping: GroupingMap) -> "GroupedMask":
        n, _, payload = text.partition(":")
        if int(n) != grouping.n_bits:
            raise GroupingError(f"hex mask encodes {n} bits, grouping expects {grouping.n_bits}")
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(payload), dtype=np.uint8))[: grouping.n_bits]
        return cls(bits, grouping)

    def to_dict(self) -> dict:
        return {"grouping_spec": self.grouping.spec(), "bits": [int(b) for b in self.bits]}

    @classmethod
    def from_dict(cls, d: dict, grouping: GroupingMap | None = None) -> "GroupedMask":
        g = GroupingMap.from_spec(d["grouping_spec"])
        if grouping is not None:
            if grouping != g:
                raise GroupingError("serialized mask belongs to a different grouping")
            g = grouping
        return cls(np.array(d["bits"], dtype=np.uint8), g)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str, grouping: GroupingMap | None = None) -> "GroupedMask":
        return cls.from_dict(json.loads(text), grouping)


def size_objective(mask: GroupedMask) -> float:
    """Normalised L1 norm ``||B||_1 / D``."""
    return mask.l1 / mask.grouping.n_bits


def _repair_groups(bits: np.ndarray, g: GroupingMap, fraction: float) -> None:
    for (a, b), need in zip(g.layer_ranges, g.min_active(fraction)):
        seg = bits[a:b]
        short = need - int(seg.sum())
        if short > 0:
            seg[np.flatnonzero(seg == 0)[:short]] = 1


def _repair_per_parameter(bits: np.ndarray, g: GroupingMap, fraction: float) -> None:
    arch = g.arch
    needs = g.min_active(fraction)
    prev_block = None
    alive = np.ones(arch.input_dim, dtype=bool)
    for layer, ((a, b), need) in enumerate(zip(g.layer_ranges, needs)):
        fan_out, width = arch.layer_shape(layer)
        flat = bits[a:b]
        block = flat.reshape(fan_out, width)
        block[:, :-1] *= alive[None, :]
        short = need - int(flat.sum())
        while short > 0:
            eligible = np.zeros((fan_out, width), dtype=bool)
            eligible[:, :-1] = alive[None, :]
            eligible[:, -1] = True
            candidates = np.flatnonzero((flat == 0) & eligible.ravel())
            if candidates.size >= short or prev_block is None:
                flat[candidates[:short]] = 1
                break
            # not enough reachable slots: revive the lowest dead source via its bias
            dead = np.flatnonzero(~alive)
            prev_block[dead[0], -1] = 1
            alive[dead[0]] = True
        alive = block.any(axis=1)
        prev_block = block


def repair(mask: GroupedMask, min_active_fraction: float = DEFAULT_MIN_ACTIVE) -> GroupedMask:
    """Make a mask feasible.

    Every layer keeps at least ``ceil(min_active_fraction * g_l)`` active
    groups, topped up lowest index first.  Under ``per_parameter`` grouping,
    weights leaving a neuron whose incoming parameters are all pruned are
    pruned too, front to back; a layer that cannot reach its minimum from
    live sources revives dead sources (lowest index) through their bias.
    Deterministic and idempotent.
    """
    if not 0.0 < min_active_fraction <= 1.0:
        raise GroupingError("min_active_fraction must lie in (0, 1]")
    bits = mask.bits.copy()
    g = mask.grouping
    if g.granularity == "per_parameter":
        _repair_per_parameter(bits, g, min_active_fraction)
    else:
        _repair_groups(bits, g, min_active_fraction)
    if np.array_equal(bits, mask.bits):
        return mask
    return GroupedMask(bits, g)


def is_feasible(mask: GroupedMask, min_active_fraction: float = DEFAULT_MIN_ACTIVE) -> bool:
    return repair(mask, min_active_fraction) == mask


def crossover(a: GroupedMask, b: GroupedMask, rng: np.random.Generator) -> tuple[GroupedMask, GroupedMask]:
    """Uniform crossover; children are returned unrepaired."""
    if a.grouping != b.grouping:
        raise GroupingError("crossover parents use different groupings")
    swap = rng.random(a.grouping.n_bits) < 0.5
    c1 = np.where(swap, b.bits, a.bits)
    c2 = np.where(swap, a.bits, b.bits)
    return GroupedMask(c1, a.grouping), GroupedMask(c2, a.grouping)


def flip_bits(mask: GroupedMask, rate: float, rng: np.random.Generator) -> GroupedMask:
    if not 0.0 <= rate <= 1.0:
        raise GroupingError("mutation rate must lie in [0, 1]")
    flips = rng.random(mask.grouping.n_bits) < rate
    return GroupedMask(mask.bits ^ flips.astype(np.uint8), mask.grouping)


def mutate(mask: GroupedMask, rate: float, rng: np.random.Generator,
           min_active_fraction: float = DEFAULT_MIN_ACTIVE) -> GroupedMask:
    """Independent per-bit flips followed by :func:`repair`."""
    return repair(flip_bits(mask, rate, rng), min_active_fraction)


def random_mask(grouping: GroupingMap, density: float, rng: np.random.Generator) -> GroupedMask:
    bits = (rng.random(grouping.n_bits) < density).astype(np.uint8)
    return GroupedMask(bits, grouping)
