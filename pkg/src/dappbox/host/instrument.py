"""Fuel metering by bytecode rewriting.

The module is rewritten so that every straight-line segment of every
function starts with a charge against a mutable i64 global::

    global.get $fuel ; i64.const C ; i64.lt_s
    if
      global.get $fuel ; i64.const C ; call $refuel ; global.set $fuel
    end
    global.get $fuel ; i64.const C ; i64.sub ; global.set $fuel

``C`` is the number of instructions in the segment (structural ``end``
markers excluded). ``refuel(remaining, cost)`` is a host import that must
return a value ``>= cost``; it is where the host accounts usage and, when a
window's budget is spent, blocks the guest until the next window. Since the
check happens before the segment runs, a guest never executes more than it
was granted.

Segments split after ``block``, ``loop``, ``if``, ``else``, ``end``, ``br``,
``br_if``, ``br_table``, ``return`` and ``unreachable``: every branch target
and fall-through lands on a segment start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

METER_MODULE = "__dappbox"
REFUEL_NAME = "refuel"
FUEL_EXPORT = "__dappbox_fuel"

WASM_MAGIC = b"\0asm\x01\0\0\0"

# canonical section order (ids); 0 = custom, dropped on rewrite
_SECTION_ORDER = [1, 2, 3, 4, 5, 13, 6, 7, 8, 9, 12, 10, 11]

_SPLIT_AFTER = {0x00, 0x02, 0x03, 0x04, 0x05, 0x0B, 0x0C, 0x0D, 0x0E, 0x0F}

_I64 = 0x7E


class InvalidBytecode(ValueError):
    pass


# -- LEB128 ------------------------------------------------------------------


def read_uleb(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(buf):
            raise InvalidBytecode("truncated LEB128")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise InvalidBytecode("LEB128 too long")


def read_sleb(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(buf):
            raise InvalidBytecode("truncated LEB128")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            if b & 0x40:
                result -= 1 << shift
            return result, pos
        if shift > 70:
            raise InvalidBytecode("LEB128 too long")


def uleb(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def sleb(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if (n == 0 and not b & 0x40) or (n == -1 and b & 0x40):
            out.append(b)
            return bytes(out)
        out.append(b | 0x80)


def _name(buf: bytes, pos: int) -> tuple[str, int]:
    n, pos = read_uleb(buf, pos)
    if pos + n > len(buf):
        raise InvalidBytecode("truncated name")
    try:
        return buf[pos : pos + n].decode("utf-8"), pos + n
    except UnicodeDecodeError as exc:
        raise InvalidBytecode("import/export name is not UTF-8") from exc


def _encode_name(s: str) -> bytes:
    b = s.encode()
    return uleb(len(b)) + b


# -- module structure ----------------------------------------------------------


@dataclass(frozen=True)
class Import:
    module: str
    name: str
    kind: int  # 0 func, 1 table, 2 memory, 3 global, 4 tag


@dataclass
class ParsedModule:
    sections: dict[int, bytes]
    imports: list[Import] = field(default_factory=list)

    @property
    def func_imports(self) -> list[Import]:
        return [i for i in self.imports if i.kind == 0]

    @property
    def n_global_imports(self) -> int:
        return sum(1 for i in self.imports if i.kind == 3)


def _skip_limits(buf: bytes, pos: int) -> int:
    flags, pos = read_uleb(buf, pos)
    _, pos = read_uleb(buf, pos)
    if flags & 1:
        _, pos = read_uleb(buf, pos)
    return pos


def _skip_reftype(buf: bytes, pos: int) -> int:
    _, pos = read_sleb(buf, pos)
    return pos


def parse_module(data: bytes) -> ParsedModule:
    if len(data) < 8 or data[:8] != WASM_MAGIC:
        raise InvalidBytecode("missing wasm magic/version header")
    sections: dict[int, bytes] = {}
    pos = 8
    while pos < len(data):
        sid = data[pos]
        size, pos = read_uleb(data, pos + 1)
        if pos + size > len(data):
            raise InvalidBytecode(f"section {sid} overruns the module")
        body = data[pos : pos + size]
        pos += size
        if sid == 0:
            continue
        if sid not in _SECTION_ORDER:
            raise InvalidBytecode(f"unknown section id {sid}")
        if sid in sections:
            raise InvalidBytecode(f"duplicate section {sid}")
        sections[sid] = body
    mod = ParsedModule(sections)
    if 2 in sections:
        buf = sections[2]
        count, p = read_uleb(buf, 0)
        for _ in range(count):
            module, p = _name(buf, p)
            name, p = _name(buf, p)
            if p >= len(buf):
                raise InvalidBytecode("truncated import")
            kind = buf[p]
            p += 1
            if kind == 0:
                _, p = read_uleb(buf, p)
            elif kind == 1:
                p = _skip_reftype(buf, p)
                p = _skip_limits(buf, p)
            elif kind == 2:
                p = _skip_limits(buf, p)
            elif kind == 3:
                p = _skip_reftype(buf, p)  # valtype
                p += 1  # mutability
            elif kind == 4:
                p += 1
                _, p = read_uleb(buf, p)
            else:
                raise InvalidBytecode(f"unknown import kind {kind}")
            mod.imports.append(Import(module, name, kind))
    return mod


# -- instruction walking -------------------------------------------------------


class _Rewriter:
    """Copies one expression, renumbering function indices at or above ``shift_from``."""

    def __init__(self, shift_from: int) -> None:
        self.shift_from = shift_from

    def fidx(self, idx: int) -> bytes:
        return uleb(idx + 1 if idx >= self.shift_from else idx)

    def instr(self, buf: bytes, pos: int, out: bytearray) -> tuple[int, int]:
        """Copy one instruction at ``pos`` into ``out``; return ``(opcode, new_pos)``."""
        start = pos
        op = buf[pos]
        pos += 1
        if op in (0x10, 0x12, 0xD2):  # call, return_call, ref.func
            idx, pos = read_uleb(buf, pos)
            out.append(op)
            out += self.fidx(idx)
            return op, pos
        if op in (0x02, 0x03, 0x04):
            _, pos = read_sleb(buf, pos)  # blocktype (s33)
        elif op in (0x0C, 0x0D) or 0x20 <= op <= 0x26 or op in (0x3F, 0x40):
            _, pos = read_uleb(buf, pos)
        elif op == 0x0E:
            n, pos = read_uleb(buf, pos)
            for _ in range(n + 1):
                _, pos = read_uleb(buf, pos)
        elif op in (0x11, 0x13):
            _, pos = read_uleb(buf, pos)
            _, pos = read_uleb(buf, pos)
        elif op == 0x1C:
            n, pos = read_uleb(buf, pos)
            for _ in range(n):
                pos = _skip_reftype(buf, pos)
        elif 0x28 <= op <= 0x3E:
            align, pos = read_uleb(buf, pos)
            if align & 0x40:
                _, pos = read_uleb(buf, pos)
            _, pos = read_uleb(buf, pos)
        elif op == 0x41:
            _, pos = read_sleb(buf, pos)
        elif op == 0x42:
            _, pos = read_sleb(buf, pos)
        elif op == 0x43:
            pos += 4
        elif op == 0x44:
            pos += 8
        elif op == 0xD0:
            pos = _skip_reftype(buf, pos)
        elif op == 0xFC:
            sub, pos = read_uleb(buf, pos)
            if sub <= 7:
                pass
            elif sub in (8, 10, 12, 14):
                _, pos = read_uleb(buf, pos)
                _, pos = read_uleb(buf, pos)
            elif sub in (9, 11, 13, 15, 16, 17):
                _, pos = read_uleb(buf, pos)
            else:
                raise InvalidBytecode(f"unsupported 0xFC sub-opcode {sub}")
        elif op in (0x00, 0x01, 0x05, 0x0B, 0x0F, 0x1A, 0x1B, 0xD1) or 0x45 <= op <= 0xC4:
            pass
        else:
            raise InvalidBytecode(f"unsupported opcode 0x{op:02x}")
        if pos > len(buf):
            raise InvalidBytecode("instruction runs past end of code")
        out += buf[start:pos]
        return op, pos

    def const_expr(self, buf: bytes, pos: int, out: bytearray) -> int:
        while True:
            if pos >= len(buf):
                raise InvalidBytecode("unterminated constant expression")
            op, pos = self.instr(buf, pos, out)
            if op == 0x0B:
                return pos


# -- rewriting -------------------------------------------------------------------


def _vec(items: list[bytes]) -> bytes:
    return uleb(len(items)) + b"".join(items)


def _append_to_vec(body: bytes | None, extra: bytes) -> bytes:
    if body is None:
        return uleb(1) + extra
    count, pos = read_uleb(body, 0)
    return uleb(count + 1) + body[pos:] + extra


def _meter_block(cost: int, fuel: bytes, refuel: bytes) -> bytes:
    c = sleb(cost)
    return (
        b"\x23" + fuel + b"\x42" + c + b"\x53"
        + b"\x04\x40"
        + b"\x23" + fuel + b"\x42" + c + b"\x10" + refuel + b"\x24" + fuel
        + b"\x0B"
        + b"\x23" + fuel + b"\x42" + c + b"\x7D" + b"\x24" + fuel
    )


def _instrument_body(body: bytes, rw: _Rewriter, fuel: bytes, refuel: bytes) -> bytes:
    out = bytearray()
    ngroups, pos = read_uleb(body, 0)
    for _ in range(ngroups):
        _, pos = read_uleb(body, pos)
        pos = _skip_reftype(body, pos)
    out += body[:pos]

    depth = 0
    segment = bytearray()
    cost = 0
    while True:
        if pos >= len(body):
            raise InvalidBytecode("function body missing final end")
        op, pos = rw.instr(body, pos, segment)
        if op != 0x0B:
            cost += 1
        if op in (0x02, 0x03, 0x04):
            depth += 1
        elif op == 0x0B:
            depth -= 1
        if op in _SPLIT_AFTER:
            if cost:
                out += _meter_block(cost, fuel, refuel)
            out += segment
            segment = bytearray()
            cost = 0
            if depth < 0:
                break
    if pos != len(body):
        raise InvalidBytecode("trailing bytes after function end")
    return bytes(out)


def _rewrite_code(body: bytes, rw: _Rewriter, fuel: bytes, refuel: bytes) -> bytes:
    count, pos = read_uleb(body, 0)
    funcs = []
    for _ in range(count):
        size, pos = read_uleb(body, pos)
        fbody = body[pos : pos + size]
        if len(fbody) != size:
            raise InvalidBytecode("code entry overruns section")
        pos += size
        new = _instrument_body(fbody, rw, fuel, refuel)
        funcs.append(uleb(len(new)) + new)
    return _vec(funcs)


def _rewrite_globals(body: bytes, rw: _Rewriter) -> tuple[bytes, int]:
    count, pos = read_uleb(body, 0)
    out = bytearray(uleb(count))
    for _ in range(count):
        start = pos
        pos = _skip_reftype(body, pos)
        pos += 1
        out += body[start:pos]
        pos = rw.const_expr(body, pos, out)
    return bytes(out), count


def _rewrite_exports(body: bytes, rw: _Rewriter) -> list[bytes]:
    count, pos = read_uleb(body, 0)
    entries = []
    for _ in range(count):
        name, pos = _name(body, pos)
        if name == FUEL_EXPORT:
            raise InvalidBytecode(f"export name {FUEL_EXPORT!r} is reserved")
        kind = body[pos]
        idx, pos = read_uleb(body, pos + 1)
        entries.append(
            _encode_name(name) + bytes([kind]) + (rw.fidx(idx) if kind == 0 else uleb(idx))
        )
    return entries


def _rewrite_elements(body: bytes, rw: _Rewriter) -> bytes:
    count, pos = read_uleb(body, 0)
    out = bytearray(uleb(count))
    for _ in range(count):
        flags, pos = read_uleb(body, pos)
        out += uleb(flags)
        if flags > 7:
            raise InvalidBytecode(f"unknown element segment flags {flags}")
        passive_or_decl = flags & 1
        explicit_table = flags & 2
        uses_exprs = flags & 4
        if not passive_or_decl:
            if explicit_table:
                idx, pos = read_uleb(body, pos)
                out += uleb(idx)
            pos = rw.const_expr(body, pos, out)
        if passive_or_decl or explicit_table:
            # elemkind byte (0x00 = funcref) or reftype
            start = pos
            pos = _skip_reftype(body, pos)
            out += body[start:pos]
        n, pos = read_uleb(body, pos)
        out += uleb(n)
        for _ in range(n):
            if uses_exprs:
                pos = rw.const_expr(body, pos, out)
            else:
                idx, pos = read_uleb(body, pos)
                out += rw.fidx(idx)
    return bytes(out)


@dataclass(frozen=True)
class MeteredModule:
    wasm: bytes
    imports: list[Import]
    refuel_index: int
    fuel_global_index: int


def instrument(data: bytes) -> MeteredModule:
    """Return a metered copy of ``data`` plus the original import list."""
    mod = parse_module(data)
    sec = dict(mod.sections)
    n_func_imports = len(mod.func_imports)
    rw = _Rewriter(shift_from=n_func_imports)

    # type for refuel: (i64, i64) -> i64
    if 1 in sec:
        n_types, _ = read_uleb(sec[1], 0)
    else:
        n_types = 0
    sec[1] = _append_to_vec(sec.get(1), b"\x60\x02\x7E\x7E\x01\x7E")

    sec[2] = _append_to_vec(
        sec.get(2),
        _encode_name(METER_MODULE) + _encode_name(REFUEL_NAME) + b"\x00" + uleb(n_types),
    )
    refuel_idx = n_func_imports

    if 6 in sec:
        globals_body, n_defined = _rewrite_globals(sec[6], rw)
    else:
        globals_body, n_defined = uleb(0), 0
    fuel_idx = mod.n_global_imports + n_defined
    sec[6] = _append_to_vec(globals_body, bytes([_I64, 0x01, 0x42, 0x00, 0x0B]))

    exports = _rewrite_exports(sec[7], rw) if 7 in sec else []
    exports.append(_encode_name(FUEL_EXPORT) + b"\x03" + uleb(fuel_idx))
    sec[7] = _vec(exports)

    if 8 in sec:
        start, _ = read_uleb(sec[8], 0)
        sec[8] = rw.fidx(start)
    if 9 in sec:
        sec[9] = _rewrite_elements(sec[9], rw)
    if 10 in sec:
        sec[10] = _rewrite_code(sec[10], rw, uleb(fuel_idx), uleb(refuel_idx))

    out = bytearray(WASM_MAGIC)
    for sid in _SECTION_ORDER:
        if sid in sec:
            out.append(sid)
            out += uleb(len(sec[sid]))
            out += sec[sid]
    return MeteredModule(bytes(out), mod.imports, refuel_idx, fuel_idx)
