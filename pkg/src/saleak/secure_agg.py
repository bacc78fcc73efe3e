"""Secure-aggregation codec: the server only ever recovers the sum of client gradients.

Two modes:

``ideal``
    Updates carry the plain float64 gradient vector and decoding is an exact
    float sum. Stands in for a perfect protocol.

``masked``
    Each client quantizes its gradient to fixed point (scale ``2**bits``),
    stores it as a two's-complement residue mod 2**64 and adds one pseudorandom
    mask per peer. For a pair ``u < v`` the lower id adds the pair mask and the
    higher id subtracts it, so every mask cancels in the modular sum.

Key agreement, secret sharing and dropout recovery are not modelled; pair
seeds come straight from the plan's seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import FormatError, ProtocolError, RangeError
from .nn import GradientSet

IDEAL = "ideal"
MASKED = "masked"
MODES = (IDEAL, MASKED)
DEFAULT_BITS = 24
# |quantized value| stays below 2**39 so sums of many clients never wrap
RANGE_BITS = 39

_MODE_CODES = {IDEAL: 0, MASKED: 1}
_HEADER = struct.Struct("<IBBQ")


def clip_bound(bits: int = DEFAULT_BITS) -> float:
    return 2.0 ** RANGE_BITS / 2.0 ** bits


def quantize(values, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Round ``values * 2**bits`` to integers and return them as uint64 residues."""
    values = np.asarray(values, dtype=np.float64)
    bound = clip_bound(bits)
    if values.size and np.max(np.abs(values)) >= bound:
        raise RangeError(f"gradient magnitude must stay below {bound} at scale 2**{bits}; clip first")
    return np.rint(np.ldexp(values, bits)).astype(np.int64).view(np.uint64)


def dequantize(residues, bits: int = DEFAULT_BITS) -> np.ndarray:
    return np.ldexp(np.asarray(residues, dtype=np.uint64).view(np.int64).astype(np.float64), -bits)


@dataclass(frozen=True)
class MaskPlan:
    client_ids: tuple
    seed: int = 0

    def __post_init__(self):
        ids = tuple(int(c) for c in self.client_ids)
        if len(set(ids)) != len(ids):
            raise ProtocolError("client ids in a mask plan must be distinct")
        object.__setattr__(self, "client_ids", ids)

    def pairs(self):
        return list(combinations(sorted(self.client_ids), 2))

    def pair_mask(self, u: int, v: int, length: int) -> np.ndarray:
        lo, hi = min(u, v), max(u, v)
        bitgen = np.random.Philox(np.random.SeedSequence([self.seed, lo, hi]))
        return bitgen.random_raw(length).astype(np.uint64)

    def client_mask(self, client_id: int, length: int) -> np.ndarray:
        """Signed sum of every pair mask involving ``client_id``, mod 2**64."""
        if client_id not in self.client_ids:
            raise ProtocolError(f"client {client_id} is not part of this plan")
        total = np.zeros(length, dtype=np.uint64)
        for u, v in self.pairs():
            if client_id == u:
                total += self.pair_mask(u, v, length)
            elif client_id == v:
                total -= self.pair_mask(u, v, length)
        return total


@dataclass(frozen=True)
class MaskedUpdate:
    client_id: int
    mode: str
    bits: int
    payload: np.ndarray

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(self.client_id, _MODE_CODES[self.mode], self.bits, self.payload.size)
        dtype = "<f8" if self.mode == IDEAL else "<u8"
        return header + np.ascontiguousarray(self.payload, dtype=dtype).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MaskedUpdate":
        if len(blob) < _HEADER.size:
            raise FormatError(f"truncated header at offset 0: {len(blob)} bytes")
        client_id, code, bits, length = _HEADER.unpack_from(blob, 0)
        modes = {v: k for k, v in _MODE_CODES.items()}
        if code not in modes:
            raise FormatError(f"unknown mode byte {code} at offset 4")
        body = blob[_HEADER.size :]
        if len(body) != 8 * length:
            raise FormatError(f"payload at offset {_HEADER.size} has {len(body)} bytes, header says {8 * length}")
        mode = modes[code]
        dtype = "<f8" if mode == IDEAL else "<u8"
        payload = np.frombuffer(body, dtype=dtype).astype(np.float64 if mode == IDEAL else np.uint64)
        return cls(client_id, mode, bits, payload)


def encode(grads: GradientSet, plan: MaskPlan, client_id: int, mode: str = IDEAL,
           bits: int = DEFAULT_BITS) -> MaskedUpdate:
    if mode not in MODES:
        raise ValueError(f"unknown secure-aggregation mode {mode!r}")
    flat = grads.flatten()
    if mode == IDEAL:
        if client_id not in plan.client_ids:
            raise ProtocolError(f"client {client_id} is not part of this plan")
        return MaskedUpdate(client_id, IDEAL, bits, flat.copy())
    payload = quantize(flat, bits) + plan.client_mask(client_id, flat.size)
    return MaskedUpdate(client_id, MASKED, bits, payload)


def aggregate_decode(updates, plan: MaskPlan, layout) -> GradientSet:
    """Decode the sum of all updates in ``plan``; individual updates are never unmasked."""
    updates = list(updates)
    if not updates:
        raise ProtocolError("no updates to aggregate")
    modes = {u.mode for u in updates}
    bits = {u.bits for u in updates}
    if len(modes) > 1 or len(bits) > 1:
        raise ProtocolError("updates mix modes or quantization scales")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client update")
    missing = set(plan.client_ids) - set(ids)
    extra = set(ids) - set(plan.client_ids)
    if missing or extra:
        raise ProtocolError(f"update set does not match plan (missing {sorted(missing)}, unexpected {sorted(extra)})")
    lengths = {u.payload.size for u in updates}
    if len(lengths) > 1:
        raise ProtocolError("updates have different lengths")
    by_id = {u.client_id: u for u in updates}
    ordered = [by_id[c] for c in plan.client_ids]
    mode = modes.pop()
    if mode == IDEAL:
        total = np.zeros(lengths.pop())
        for u in ordered:
            total = total + u.payload
    else:
        acc = np.zeros(lengths.pop(), dtype=np.uint64)
        for u in ordered:
            acc += u.payload
        total = dequantize(acc, bits.pop())
    return GradientSet.from_flat(layout, total)
