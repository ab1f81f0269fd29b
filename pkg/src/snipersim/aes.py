"""AES-128 with the S-Box lookup indices exposed.

The scalar path is what the victim runs; it returns, next to the
ciphertext, the SubBytes input of every round so the victim can emit its
table accesses. ``encrypt_batch`` is a numpy version used for Monte Carlo
over many (key, plaintext) pairs.
"""

from __future__ import annotations

import numpy as np


def _build_sbox() -> list[int]:
    sbox = [0] * 256
    p = q = 1
    while True:
        # p *= 3 in GF(2^8)
        p ^= ((p << 1) ^ (0x1B if p & 0x80 else 0)) & 0xFF
        # q /= 3
        q ^= q << 1
        q ^= q << 2
        q ^= q << 4
        q &= 0xFF
        if q & 0x80:
            q ^= 0x09
        x = q ^ _rotl8(q, 1) ^ _rotl8(q, 2) ^ _rotl8(q, 3) ^ _rotl8(q, 4)
        sbox[p] = x ^ 0x63
        if p == 1:
            break
    sbox[0] = 0x63
    return sbox


def _rotl8(x: int, s: int) -> int:
    return ((x << s) | (x >> (8 - s))) & 0xFF


SBOX = _build_sbox()
INV_SBOX = [0] * 256
for _i, _v in enumerate(SBOX):
    INV_SBOX[_v] = _i

XTIME = [((b << 1) ^ (0x1B if b & 0x80 else 0)) & 0xFF for b in range(256)]
RCON = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36]

# output byte i of ShiftRows takes input byte SHIFT_ROWS[i] (column-major state)
SHIFT_ROWS = [(i + 4 * (i % 4)) % 16 for i in range(16)]

ROUNDS = 10


def expand_key(key: bytes) -> list[list[int]]:
    """AES-128 key schedule: 11 round keys of 16 bytes."""
    if len(key) != 16:
        raise ValueError("AES-128 key must be 16 bytes")
    w = [list(key[4 * i : 4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [SBOX[b] for b in t]
            t[0] ^= RCON[i // 4 - 1]
        w.append([a ^ b for a, b in zip(w[i - 4], t)])
    return [sum(w[4 * r : 4 * r + 4], []) for r in range(11)]


def invert_key_schedule(last_round_key: bytes) -> bytes:
    """Walk the AES-128 schedule backwards from round key 10 to the cipher key."""
    if len(last_round_key) != 16:
        raise ValueError("round key must be 16 bytes")
    w: list[list[int]] = [[0] * 4 for _ in range(44)]
    for j in range(4):
        w[40 + j] = list(last_round_key[4 * j : 4 * j + 4])
    for i in range(43, 3, -1):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [SBOX[b] for b in t]
            t[0] ^= RCON[i // 4 - 1]
        w[i - 4] = [a ^ b for a, b in zip(w[i], t)]
    return bytes(sum(w[:4], []))


def _mix_columns(s: list[int]) -> list[int]:
    out = [0] * 16
    xt = XTIME
    for c in range(0, 16, 4):
        a0, a1, a2, a3 = s[c], s[c + 1], s[c + 2], s[c + 3]
        t = a0 ^ a1 ^ a2 ^ a3
        out[c] = a0 ^ t ^ xt[a0 ^ a1]
        out[c + 1] = a1 ^ t ^ xt[a1 ^ a2]
        out[c + 2] = a2 ^ t ^ xt[a2 ^ a3]
        out[c + 3] = a3 ^ t ^ xt[a3 ^ a0]
    return out


def encrypt_trace(round_keys: list[list[int]], plaintext: bytes) -> tuple[bytes, list[list[int]]]:
    """Encrypt one block.

    Returns the ciphertext and, for rounds 1..10, the 16 SubBytes inputs in
    lookup order (state byte 0 first).
    """
    s = [p ^ k for p, k in zip(plaintext, round_keys[0])]
    lookups = []
    sb = SBOX
    for r in range(1, ROUNDS + 1):
        lookups.append(s)
        sub = [sb[b] for b in s]
        shifted = [sub[j] for j in SHIFT_ROWS]
        if r != ROUNDS:
            shifted = _mix_columns(shifted)
        rk = round_keys[r]
        s = [a ^ b for a, b in zip(shifted, rk)]
    return bytes(s), lookups


def encrypt(key: bytes, plaintext: bytes) -> bytes:
    return encrypt_trace(expand_key(key), plaintext)[0]


# --------------------------------------------------------------------------
# batched numpy path

SBOX_NP = np.array(SBOX, dtype=np.uint8)
XTIME_NP = np.array(XTIME, dtype=np.uint8)
_RCON_NP = np.array(RCON, dtype=np.uint8)


def expand_key_batch(keys: np.ndarray) -> np.ndarray:
    """keys: (n, 16) uint8 -> (n, 11, 16) round keys."""
    n = keys.shape[0]
    w = np.zeros((n, 44, 4), dtype=np.uint8)
    w[:, :4, :] = keys.reshape(n, 4, 4)
    for i in range(4, 44):
        t = w[:, i - 1, :].copy()
        if i % 4 == 0:
            t = SBOX_NP[np.roll(t, -1, axis=1)]
            t[:, 0] ^= _RCON_NP[i // 4 - 1]
        w[:, i, :] = w[:, i - 4, :] ^ t
    return w.reshape(n, 11, 16)


def encrypt_batch(keys: np.ndarray, plaintexts: np.ndarray, with_last_round: bool = False):
    """Encrypt n blocks under n keys.

    With ``with_last_round`` also returns the (n, 16) SubBytes inputs of the
    final round in lookup order.
    """
    rk = expand_key_batch(keys)
    s = plaintexts ^ rk[:, 0, :]
    sr = np.array(SHIFT_ROWS)
    last = None
    for r in range(1, ROUNDS + 1):
        if r == ROUNDS:
            last = s.copy()
        sub = SBOX_NP[s][:, sr]
        if r != ROUNDS:
            a = sub.reshape(-1, 4, 4)
            t = a[:, :, 0] ^ a[:, :, 1] ^ a[:, :, 2] ^ a[:, :, 3]
            out = np.empty_like(a)
            for j in range(4):
                out[:, :, j] = a[:, :, j] ^ t ^ XTIME_NP[a[:, :, j] ^ a[:, :, (j + 1) % 4]]
            sub = out.reshape(-1, 16)
        s = sub ^ rk[:, r, :]
    if with_last_round:
        return s, last
    return s
