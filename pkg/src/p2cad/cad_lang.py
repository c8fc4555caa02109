"""Featured CAD command language.

A model is a sequence of sketch loops (``SOL`` followed by curves) closed by
an extrusion (``EXT``), repeated, then terminated by ``EOS``. Every command
carries 16 quantized parameter slots; slot class 0 means "unused" and classes
1..256 are uniform bins over the slot's real range.

Curve parameters follow the usual convention: a LINE or ARC stores its end
point, its start point being the end of the previous curve in the loop (the
first curve starts where the last one ends). ARC adds a sweep angle and a
counter-clockwise flag; CIRCLE stores centre and radius.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    ArityError,
    BadClass,
    BadRange,
    FormatError,
    GrammarError,
    InvalidSequence,
    MalformedTokens,
    NonFiniteParam,
    ParseError,
    SequenceTooLong,
    UnknownCommand,
    UnusedParam,
)

MAX_LEN = 60
N_PARAMS = 16
N_BINS = 256
N_CLASSES = N_BINS + 1  # + UNUSED
UNUSED = 0


class CommandType(IntEnum):
    SOL = 0
    LINE = 1
    ARC = 2
    CIRCLE = 3
    EXT = 4
    EOS = 5


CURVES = frozenset({CommandType.LINE, CommandType.ARC, CommandType.CIRCLE})

PARAM_NAMES = (
    "x", "y", "alpha", "f", "r",
    "theta", "phi", "gamma",
    "px", "py", "pz", "s",
    "e1", "e2", "b", "u",
)
PARAM_INDEX = {name: i for i, name in enumerate(PARAM_NAMES)}

_TWO_PI = 2.0 * math.pi
PARAM_RANGES = {
    "x": (-1.0, 1.0),
    "y": (-1.0, 1.0),
    "alpha": (0.0, _TWO_PI),
    "f": (0.0, 1.0),
    "r": (-1.0, 1.0),
    "theta": (-math.pi, math.pi),
    "phi": (-math.pi, math.pi),
    "gamma": (-math.pi, math.pi),
    "px": (-1.0, 1.0),
    "py": (-1.0, 1.0),
    "pz": (-1.0, 1.0),
    "s": (0.0, 2.0),
    "e1": (-1.0, 1.0),
    "e2": (-1.0, 1.0),
    "b": (0.0, 3.0),
    "u": (0.0, 2.0),
}
# integer-valued slots; dequantized values are rounded back to integers
ENUM_PARAMS = frozenset({"f", "b", "u"})


class BooleanOp(IntEnum):
    NEW = 0
    UNION = 1
    CUT = 2
    INTERSECT = 3


class ExtentType(IntEnum):
    TWO_SIDED = 0   # [min(e1, e2), max(e1, e2)]
    SYMMETRIC = 1   # [-|e1|, |e1|]
    ONE_SIDED = 2   # between 0 and e1


ARITY = {
    CommandType.SOL: (),
    CommandType.LINE: ("x", "y"),
    CommandType.ARC: ("x", "y", "alpha", "f"),
    CommandType.CIRCLE: ("x", "y", "r"),
    CommandType.EXT: ("theta", "phi", "gamma", "px", "py", "pz", "s",
                      "e1", "e2", "b", "u"),
    CommandType.EOS: (),
}

# (6, 16) boolean table of used slots per command code
ARITY_MASK = np.zeros((len(CommandType), N_PARAMS), dtype=bool)
for _ct, _names in ARITY.items():
    for _n in _names:
        ARITY_MASK[_ct, PARAM_INDEX[_n]] = True

JSON_NAMES = {
    CommandType.SOL: "SOL",
    CommandType.LINE: "Line",
    CommandType.ARC: "Arc",
    CommandType.CIRCLE: "Circle",
    CommandType.EXT: "Ext",
}
JSON_TYPES = {v: k for k, v in JSON_NAMES.items()}


def quantize_param(value, lo, hi):
    """Map a real value to its bin class in 1..256 (values outside clamp)."""
    if not (lo < hi):
        raise BadRange(f"lo={lo} must be < hi={hi}")
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteParam(repr(value))
    k = int(np.rint((value - lo) / (hi - lo) * (N_BINS - 1)))
    return 1 + min(max(k, 0), N_BINS - 1)


def dequantize_param(cls, lo, hi):
    """Left edge of bin ``cls``; class 0 is the UNUSED sentinel."""
    cls = int(cls)
    if cls == UNUSED:
        raise UnusedParam("class 0 carries no value")
    if not 1 <= cls <= N_BINS:
        raise BadClass(f"class {cls} outside 1..{N_BINS}")
    return lo + (cls - 1) / (N_BINS - 1) * (hi - lo)


def quantize_named(name, value):
    lo, hi = PARAM_RANGES[name]
    return quantize_param(value, lo, hi)


def dequantize_named(name, cls):
    lo, hi = PARAM_RANGES[name]
    v = dequantize_param(cls, lo, hi)
    if name in ENUM_PARAMS:
        return float(round(v))
    return v


@dataclass(frozen=True)
class CadCommand:
    ctype: CommandType
    params: tuple = field(default=(UNUSED,) * N_PARAMS)

    def __post_init__(self):
        try:
            ctype = CommandType(int(self.ctype))
        except ValueError:
            raise UnknownCommand(f"code {self.ctype!r}") from None
        params = tuple(int(p) for p in self.params)
        if len(params) != N_PARAMS:
            raise ArityError(f"expected {N_PARAMS} params, got {len(params)}")
        mask = ARITY_MASK[ctype]
        for i, p in enumerate(params):
            if not 0 <= p <= N_BINS:
                raise ArityError(f"{ctype.name} slot {PARAM_NAMES[i]} class {p} out of range")
            if mask[i] != (p != UNUSED):
                state = "missing" if mask[i] else "unexpected"
                raise ArityError(f"{ctype.name}: {state} parameter {PARAM_NAMES[i]}")
        object.__setattr__(self, "ctype", ctype)
        object.__setattr__(self, "params", params)

    @classmethod
    def from_values(cls, ctype, **values):
        """Build a command from real-valued named parameters."""
        ctype = CommandType(ctype)
        params = [UNUSED] * N_PARAMS
        for name, v in values.items():
            if name not in PARAM_INDEX:
                raise ArityError(f"unknown parameter {name!r}")
            params[PARAM_INDEX[name]] = quantize_named(name, v)
        return cls(ctype, tuple(params))

    def values(self):
        """Dequantized used parameters, in slot order."""
        return {n: dequantize_named(n, self.params[PARAM_INDEX[n]])
                for n in ARITY[self.ctype]}


def sol():
    return CadCommand(CommandType.SOL)


def line(x, y):
    return CadCommand.from_values(CommandType.LINE, x=x, y=y)


def arc(x, y, alpha, f=1):
    return CadCommand.from_values(CommandType.ARC, x=x, y=y, alpha=alpha, f=f)


def circle(x, y, r):
    return CadCommand.from_values(CommandType.CIRCLE, x=x, y=y, r=r)


def ext(e1, e2, *, theta=-math.pi, phi=-math.pi, gamma=-math.pi,
        px=0.0, py=0.0, pz=0.0, s=1.0, b=BooleanOp.NEW, u=ExtentType.TWO_SIDED):
    # Default angles are -pi (exactly representable); see geometry.plane_rotation.
    return CadCommand.from_values(
        CommandType.EXT, theta=theta, phi=phi, gamma=gamma, px=px, py=py, pz=pz,
        s=s, e1=e1, e2=e2, b=int(b), u=int(u))


def eos():
    return CadCommand(CommandType.EOS)


def grammar_error_index(codes):
    """Index of the first command violating ``(SOL curve+)+ EXT`` groups + EOS.

    Returns None when the sequence is well-formed. A lone EOS (the empty
    model) is accepted.
    """
    state = "start"  # start | sol | loop | ext
    for i, c in enumerate(codes):
        if c == CommandType.EOS:
            if state in ("start", "ext"):
                return None if i == len(codes) - 1 else i + 1
            return i
        if c == CommandType.SOL:
            if state == "sol":
                return i
            state = "sol"
        elif c in CURVES:
            if state not in ("sol", "loop"):
                return i
            state = "loop"
        elif c == CommandType.EXT:
            if state != "loop":
                return i
            state = "ext"
        else:
            return i
    return len(codes)  # missing EOS


@dataclass(frozen=True)
class CadSequence:
    commands: tuple

    def __post_init__(self):
        cmds = tuple(self.commands)
        if len(cmds) > MAX_LEN:
            raise SequenceTooLong(f"{len(cmds)} commands > {MAX_LEN}")
        bad = grammar_error_index([c.ctype for c in cmds])
        if bad is not None:
            raise GrammarError(bad)
        object.__setattr__(self, "commands", cmds)

    def __len__(self):
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def __getitem__(self, i):
        return self.commands[i]

    @classmethod
    def empty(cls):
        return cls((eos(),))


# ---------------------------------------------------------------- JSON

def _format_real(v):
    return repr(float(v))


def serialize_sequence(seq):
    """Deterministic JSON text; EOS is implicit."""
    if not isinstance(seq, CadSequence):
        raise InvalidSequence(f"expected CadSequence, got {type(seq).__name__}")
    cmds = seq.commands
    if grammar_error_index([c.ctype for c in cmds]) is not None or len(cmds) > MAX_LEN:
        raise InvalidSequence("sequence violates its invariants")
    parts = []
    for c in cmds[:-1]:
        vals = c.values()
        body = ", ".join(f'"{k}": {_format_real(v)}' for k, v in vals.items())
        parts.append(f'{{"type": "{JSON_NAMES[c.ctype]}", "params": {{{body}}}}}')
    if not parts:
        return '{"version": 1, "commands": []}\n'
    return '{"version": 1, "commands": [\n  ' + ",\n  ".join(parts) + "\n]}\n"


def parse_sequence(text):
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(str(exc)) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("commands"), list):
        raise ParseError('expected an object with a "commands" list')
    if doc.get("version", 1) != 1:
        raise ParseError(f"unsupported version {doc.get('version')!r}")
    cmds = []
    for i, item in enumerate(doc["commands"]):
        if not isinstance(item, dict) or "type" not in item:
            raise ParseError(f"command {i} is not an object with a type")
        name = item["type"]
        if name not in JSON_TYPES:
            raise UnknownCommand(f"command {i}: {name!r}")
        ctype = JSON_TYPES[name]
        params = item.get("params", {})
        if not isinstance(params, dict):
            raise ParseError(f"command {i}: params must be an object")
        expected = set(ARITY[ctype])
        if set(params) != expected:
            raise ArityError(f"command {i} ({name}): expected {sorted(expected)}, "
                             f"got {sorted(params)}")
        for k, v in params.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParseError(f"command {i}: parameter {k} is not a number")
        cmds.append(CadCommand.from_values(ctype, **params))
    if len(cmds) + 1 > MAX_LEN:
        raise SequenceTooLong(f"{len(cmds) + 1} commands > {MAX_LEN}")
    cmds.append(eos())
    return CadSequence(tuple(cmds))


def load_sequence(path):
    return parse_sequence(Path(path).read_text())


def save_sequence(seq, path):
    Path(path).write_text(serialize_sequence(seq))


# ---------------------------------------------------------------- tokens

def to_token_matrix(seq):
    """(60, 17) int64 matrix: command code then 16 parameter classes."""
    if len(seq.commands) > MAX_LEN:
        raise SequenceTooLong(f"{len(seq.commands)} commands > {MAX_LEN}")
    m = np.zeros((MAX_LEN, 1 + N_PARAMS), dtype=np.int64)
    m[:, 0] = CommandType.EOS
    for i, c in enumerate(seq.commands):
        m[i, 0] = c.ctype
        m[i, 1:] = c.params
    return m


def from_token_matrix(m):
    m = np.asarray(m)
    if m.shape != (MAX_LEN, 1 + N_PARAMS):
        raise MalformedTokens(f"shape {m.shape}, expected {(MAX_LEN, 1 + N_PARAMS)}")
    codes = m[:, 0]
    eos_rows = np.flatnonzero(codes == CommandType.EOS)
    if eos_rows.size == 0:
        raise MalformedTokens("no EOS row")
    end = int(eos_rows[0])
    if np.any(m[end:, 0] != CommandType.EOS) or np.any(m[end:, 1:] != 0):
        raise MalformedTokens(f"rows after index {end} are not EOS padding")
    try:
        cmds = tuple(CadCommand(int(r[0]), tuple(r[1:].tolist())) for r in m[:end + 1])
        return CadSequence(cmds)
    except (ArityError, UnknownCommand, GrammarError) as exc:
        raise MalformedTokens(str(exc)) from None


@dataclass(frozen=True)
class ValidityReport:
    ok: bool
    violations: tuple = ()


VIOLATION_CODES = ("NoExtrude", "EmptyLoop", "BadOrder", "BadArity", "NoEos")


def validate_syntax(m):
    """Grammar and arity report for a token matrix; never raises on content."""
    m = np.asarray(m)
    found = []

    def flag(code):
        if code not in found:
            found.append(code)

    if m.ndim != 2 or m.shape[1] != 1 + N_PARAMS:
        return ValidityReport(False, ("BadOrder",))
    codes = m[:, 0].tolist()
    params = m[:, 1:]
    known = np.isin(m[:, 0], np.arange(len(CommandType)))
    if not known.all():
        flag("BadOrder")
    safe_codes = np.where(known, m[:, 0], CommandType.EOS)
    if (params < 0).any() or (params > N_BINS).any() or \
            ((params != UNUSED) != ARITY_MASK[safe_codes]).any():
        flag("BadArity")

    state = "start"
    has_ext = False
    end = None
    for i, c in enumerate(codes):
        if c == CommandType.EOS:
            end = i
            break
        if c == CommandType.SOL:
            if state == "sol":
                flag("EmptyLoop")
            state = "sol"
        elif c in CURVES:
            if state in ("sol", "loop"):
                state = "loop"
            else:
                flag("BadOrder")
        elif c == CommandType.EXT:
            if state == "sol":
                flag("EmptyLoop")
            elif state != "loop":
                flag("BadOrder")
            state = "ext"
            has_ext = True
        else:
            flag("BadOrder")
    if end is None:
        flag("NoEos")
    else:
        if state == "sol":
            flag("EmptyLoop")
        if state != "ext" or not has_ext:
            flag("NoExtrude")
        if any(c != CommandType.EOS for c in codes[end + 1:]):
            flag("BadOrder")
    return ValidityReport(not found, tuple(found))


# ---------------------------------------------------------------- binary container

TOKENS_MAGIC = b"P2CD"


def write_tokens(path, matrices):
    """Little-endian container: magic, u32 count, count x 60 x 17 u16."""
    mats = [np.asarray(m) for m in matrices]
    for m in mats:
        if m.shape != (MAX_LEN, 1 + N_PARAMS):
            raise MalformedTokens(f"shape {m.shape}")
    data = np.stack(mats).astype("<u2") if mats else np.zeros((0, MAX_LEN, 1 + N_PARAMS), "<u2")
    with open(path, "wb") as fh:
        fh.write(TOKENS_MAGIC)
        fh.write(struct.pack("<I", len(mats)))
        fh.write(data.tobytes(order="C"))


def read_tokens(path):
    raw = Path(path).read_bytes()
    if raw[:4] != TOKENS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    n = count * MAX_LEN * (1 + N_PARAMS)
    if len(raw) != 8 + 2 * n:
        raise FormatError(f"{path}: expected {8 + 2 * n} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype="<u2", offset=8, count=n)
    return arr.reshape(count, MAX_LEN, 1 + N_PARAMS).astype(np.int64)

