"""Block-matching binary deltas.

The base is cut into aligned blocks and indexed by a weak Adler-style
checksum. A rolling window over the target finds block matches, which are
confirmed byte-for-byte and then extended in both directions. Everything
between matches is emitted as literal bytes.

Wire format::

    b"AXD1" varint(target_len) op*
    op := 0x01 varint(base_offset) varint(length)      copy
        | 0x02 varint(length) bytes                    insert
"""

from __future__ import annotations

from .errors import CorruptionError

BLOCK = 4096
MAGIC = b"AXD1"
_COPY, _INSERT = 1, 2
_MOD = 1 << 16


def _varint(n: int, out: bytearray) -> None:
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(buf):
            raise CorruptionError("truncated varint in delta")
        b = buf[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7


def _weak(data, start: int, size: int) -> tuple[int, int]:
    a = b = 0
    for i in range(size):
        x = data[start + i]
        a += x
        b += (size - i) * x
    return a % _MOD, b % _MOD


def diff(base: bytes, target: bytes, block: int = BLOCK) -> bytes:
    out = bytearray(MAGIC)
    _varint(len(target), out)
    ops: list[tuple] = []
    lit_start = 0

    def flush_literal(end: int) -> None:
        if end > lit_start:
            ops.append((_INSERT, lit_start, end))

    table: dict[int, list[int]] = {}
    for off in range(0, len(base) - block + 1, block):
        a, b = _weak(base, off, block)
        table.setdefault(a | (b << 16), []).append(off)

    n = len(target)
    p = 0
    if table and n >= block:
        a, b = _weak(target, 0, block)
        while True:
            match = None
            for off in table.get(a | (b << 16), ()):
                if base[off : off + block] == target[p : p + block]:
                    match = off
                    break
            if match is not None:
                # extend backwards into the pending literal, then forwards
                s, o = p, match
                while s > lit_start and o > 0 and target[s - 1] == base[o - 1]:
                    s -= 1
                    o -= 1
                e, eo = p + block, match + block
                while e + block <= n and eo + block <= len(base) and target[e : e + block] == base[eo : eo + block]:
                    e += block
                    eo += block
                while e < n and eo < len(base) and target[e] == base[eo]:
                    e += 1
                    eo += 1
                flush_literal(s)
                ops.append((_COPY, o, e - s))
                lit_start = p = e
                if p + block > n:
                    break
                a, b = _weak(target, p, block)
                continue
            if p + block >= n:
                break
            # roll the window one byte
            x_out, x_in = target[p], target[p + block]
            a = (a - x_out + x_in) % _MOD
            b = (b - block * x_out + a) % _MOD
            p += 1
    flush_literal(n)

    for op in ops:
        if op[0] == _COPY:
            out.append(_COPY)
            _varint(op[1], out)
            _varint(op[2], out)
        else:
            _, s, e = op
            out.append(_INSERT)
            _varint(e - s, out)
            out += target[s:e]
    return bytes(out)


def apply(base: bytes, delta: bytes) -> bytes:
    if delta[:4] != MAGIC:
        raise CorruptionError("not a delta blob")
    size, pos = _read_varint(delta, 4)
    out = bytearray()
    while pos < len(delta):
        op = delta[pos]
        pos += 1
        if op == _COPY:
            off, pos = _read_varint(delta, pos)
            length, pos = _read_varint(delta, pos)
            if off + length > len(base):
                raise CorruptionError("delta copy runs past the end of its base")
            out += base[off : off + length]
        elif op == _INSERT:
            length, pos = _read_varint(delta, pos)
            if pos + length > len(delta):
                raise CorruptionError("truncated delta literal")
            out += delta[pos : pos + length]
            pos += length
        else:
            raise CorruptionError(f"unknown delta op {op}")
    if len(out) != size:
        raise CorruptionError(f"delta produced {len(out)} bytes, header says {size}")
    return bytes(out)
