"""Context-adaptive binary range coder for signed integer codes.

Each code ``q`` of a ``b``-bit stream is binarized as

* significance flag ``q != 0``     -- context chosen by the previous flag
* sign flag                        -- one context
* exponent ``k = floor(log2|q|)``  -- unary, one context per bin index,
  truncated at ``k = b - 2``
* remainder ``|q| - 2**k``         -- ``k`` bypass bits, MSB first

Probabilities are 15-bit integers (probability of a 0 bin) adapted by two
shift-based estimators (window 16 and 128) whose mean drives the coder. The
arithmetic core is a carry-propagating 32-bit range coder. All arithmetic is
integer, so streams are bit-identical on every platform.
"""
from __future__ import annotations

import numpy as np
from numba import njit

PROB_BITS = 15
PROB_ONE = 1 << PROB_BITS
PROB_HALF = PROB_ONE >> 1
FAST_SHIFT = 4
SLOW_SHIFT = 7
TOP = 1 << 24
MASK32 = 0xFFFFFFFF

# context layout
CTX_SIG = 0  # 2 contexts: previous code was zero / nonzero
CTX_SIGN = 2
CTX_EXP = 3  # 31 contexts, one per unary bin
NUM_CONTEXTS = CTX_EXP + 31

STATUS_OK = 0
STATUS_EXHAUSTED = 1


@njit(cache=True, inline="always")
def _prob(fast, slow, ctx):
    return (fast[ctx] + slow[ctx]) >> 1


@njit(cache=True, inline="always")
def _adapt(fast, slow, ctx, bit):
    if bit == 0:
        fast[ctx] += (PROB_ONE - fast[ctx]) >> FAST_SHIFT
        slow[ctx] += (PROB_ONE - slow[ctx]) >> SLOW_SHIFT
    else:
        fast[ctx] -= fast[ctx] >> FAST_SHIFT
        slow[ctx] -= slow[ctx] >> SLOW_SHIFT


@njit(cache=True)
def _fresh_contexts():
    fast = np.full(NUM_CONTEXTS, PROB_HALF, dtype=np.int64)
    slow = np.full(NUM_CONTEXTS, PROB_HALF, dtype=np.int64)
    return fast, slow


# --- encoder ---------------------------------------------------------------


# One code emits at most ~45 bytes (33 context bins of <= 9 bits plus 30
# bypass bits), so the buffer is grown between codes, never inside a bin.
MAX_BYTES_PER_CODE = 64


@njit(cache=True, inline="always")
def _shift_low(out, low, cache, pending, pos):
    if low < 0xFF000000 or low > MASK32:
        carry = low >> 32
        temp = cache
        while True:
            out[pos] = (temp + carry) & 0xFF
            pos += 1
            temp = 0xFF
            pending -= 1
            if pending == 0:
                break
        cache = (low >> 24) & 0xFF
    pending += 1
    low = (low & 0x00FFFFFF) << 8
    return low, cache, pending, pos


@njit(cache=True, inline="always")
def _normalize(out, low, rng, cache, pending, pos):
    while rng < TOP:
        rng <<= 8
        low, cache, pending, pos = _shift_low(out, low, cache, pending, pos)
    return low, rng, cache, pending, pos


@njit(cache=True, inline="always")
def _split(rng, fast, slow, ctx, bit, low):
    bound = (rng >> PROB_BITS) * _prob(fast, slow, ctx)
    _adapt(fast, slow, ctx, bit)
    if bit == 0:
        return low, bound
    return low + bound, rng - bound


@njit(cache=True)
def encode_codes(codes, bitwidth):
    """Entropy-code a flat int64 array; returns the payload bytes."""
    n = codes.shape[0]
    out = np.empty(n * bitwidth // 8 + 4 * MAX_BYTES_PER_CODE, dtype=np.uint8)
    low = np.int64(0)
    rng = np.int64(MASK32)
    cache = np.int64(0)
    pending = np.int64(1)  # bytes held back until a carry can no longer reach them
    pos = np.int64(0)
    fast, slow = _fresh_contexts()
    kmax = bitwidth - 2
    prev_sig = 0
    for i in range(n):
        if pos + pending + MAX_BYTES_PER_CODE > out.shape[0]:
            bigger = np.empty(out.shape[0] * 2 + pending, dtype=np.uint8)
            bigger[:pos] = out[:pos]
            out = bigger
        q = codes[i]
        sig = 1 if q != 0 else 0
        low, rng = _split(rng, fast, slow, CTX_SIG + prev_sig, sig, low)
        low, rng, cache, pending, pos = _normalize(out, low, rng, cache, pending, pos)
        prev_sig = sig
        if sig == 0:
            continue
        m = q
        neg = 0
        if q < 0:
            m = -q
            neg = 1
        low, rng = _split(rng, fast, slow, CTX_SIGN, neg, low)
        low, rng, cache, pending, pos = _normalize(out, low, rng, cache, pending, pos)
        k = 0
        while (m >> (k + 1)) != 0:
            k += 1
        for j in range(k):
            low, rng = _split(rng, fast, slow, CTX_EXP + j, 1, low)
            low, rng, cache, pending, pos = _normalize(out, low, rng, cache, pending, pos)
        if k < kmax:
            low, rng = _split(rng, fast, slow, CTX_EXP + k, 0, low)
            low, rng, cache, pending, pos = _normalize(out, low, rng, cache, pending, pos)
        for j in range(k - 1, -1, -1):
            rng >>= 1
            if (m >> j) & 1:
                low += rng
            low, rng, cache, pending, pos = _normalize(out, low, rng, cache, pending, pos)
    if pos + pending + 8 > out.shape[0]:
        bigger = np.empty(pos + pending + 8, dtype=np.uint8)
        bigger[:pos] = out[:pos]
        out = bigger
    # flush: push all 32 bits of low (plus the cache byte) out
    for _ in range(5):
        low, cache, pending, pos = _shift_low(out, low, cache, pending, pos)
    return out[:pos].copy()


# --- decoder ---------------------------------------------------------------
# state: [code, range, in_pos, status]


@njit(cache=True, inline="always")
def _next_byte(data, st):
    pos = st[2]
    if pos >= data.shape[0]:
        st[3] = STATUS_EXHAUSTED
        return 0
    st[2] = pos + 1
    return np.int64(data[pos])


@njit(cache=True, inline="always")
def _decode_bin(data, st, fast, slow, ctx):
    bound = (st[1] >> PROB_BITS) * _prob(fast, slow, ctx)
    if st[0] < bound:
        st[1] = bound
        bit = 0
    else:
        st[0] -= bound
        st[1] -= bound
        bit = 1
    _adapt(fast, slow, ctx, bit)
    while st[1] < TOP:
        st[1] <<= 8
        st[0] = ((st[0] << 8) | _next_byte(data, st)) & MASK32
    return bit


@njit(cache=True, inline="always")
def _decode_bypass(data, st):
    st[1] >>= 1
    bit = 0
    if st[0] >= st[1]:
        st[0] -= st[1]
        bit = 1
    while st[1] < TOP:
        st[1] <<= 8
        st[0] = ((st[0] << 8) | _next_byte(data, st)) & MASK32
    return bit


@njit(cache=True)
def decode_codes(data, n, bitwidth):
    """Inverse of encode_codes. Returns (codes, status, bytes consumed)."""
    codes = np.zeros(n, dtype=np.int64)
    st = np.zeros(4, dtype=np.int64)
    st[1] = MASK32
    for _ in range(5):
        st[0] = ((st[0] << 8) | _next_byte(data, st)) & MASK32
    if st[3] != STATUS_OK:
        return codes, st[3], st[2]
    fast, slow = _fresh_contexts()
    kmax = bitwidth - 2
    prev_sig = 0
    for i in range(n):
        sig = _decode_bin(data, st, fast, slow, CTX_SIG + prev_sig)
        prev_sig = sig
        if sig:
            neg = _decode_bin(data, st, fast, slow, CTX_SIGN)
            k = 0
            while k < kmax and _decode_bin(data, st, fast, slow, CTX_EXP + k) == 1:
                k += 1
            m = np.int64(1)
            for _ in range(k):
                m = (m << 1) | _decode_bypass(data, st)
            codes[i] = -m if neg else m
        if st[3] != STATUS_OK:
            return codes, st[3], st[2]
    return codes, st[3], st[2]
