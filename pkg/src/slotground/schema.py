"""Nested object-centric annotation schema: types, parser, serializer.

An annotation is a sequence of ``<element: i>`` blocks, one per object,
each holding one ``<prop> value </prop>`` child per property in the
space. Discrete values are bare symbols (spaces allowed, e.g. "dining
table"); continuous values are parenthesized comma lists. Parsing is
whitespace-insensitive; serialization is canonical: properties in
property-space order, continuous components printed with two decimals.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Union

ValueType = Union[str, tuple[float, ...]]

_TAG_RE = re.compile(r"<\s*(/?)\s*([A-Za-z_]\w*)\s*(?::\s*(\d+))?\s*>")
_NAME_RE = re.compile(r"[A-Za-z_]\w*$")


class SchemaError(ValueError):
    """Structured parse/validation failure with source position."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(message + where)


@dataclass(frozen=True)
class DiscreteProperty:
    name: str
    vocab: tuple[str, ...]

    @property
    def kind(self) -> str:
        return "discrete"


@dataclass(frozen=True)
class ContinuousProperty:
    name: str
    dim: int
    units: str = ""

    @property
    def kind(self) -> str:
        return "continuous"


PropertyDef = Union[DiscreteProperty, ContinuousProperty]


class PropertySpace:
    """Ordered property definitions shared by every schema in a corpus."""

    def __init__(self, properties: list[PropertyDef] | tuple[PropertyDef, ...]):
        self.properties: tuple[PropertyDef, ...] = tuple(properties)
        names = [p.name for p in self.properties]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate property names: {names}")
        for p in self.properties:
            if not _NAME_RE.match(p.name) or p.name == "element":
                raise SchemaError(f"property name {p.name!r} is not a valid tag")
            if isinstance(p, DiscreteProperty):
                if len(set(p.vocab)) != len(p.vocab):
                    raise SchemaError(f"duplicate vocab symbols for {p.name!r}")
            elif p.dim < 1:
                raise SchemaError(f"continuous property {p.name!r} needs dim >= 1")
        self._by_name = {p.name: p for p in self.properties}

    def __iter__(self) -> Iterator[PropertyDef]:
        return iter(self.properties)

    def __len__(self) -> int:
        return len(self.properties)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> PropertyDef:
        return self._by_name[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, PropertySpace) and self.properties == other.properties

    def names(self) -> list[str]:
        return [p.name for p in self.properties]

    def to_dict(self) -> list[dict]:
        out = []
        for p in self.properties:
            if isinstance(p, DiscreteProperty):
                out.append({"name": p.name, "kind": "discrete", "vocab": list(p.vocab)})
            else:
                out.append({"name": p.name, "kind": "continuous", "dim": p.dim, "units": p.units})
        return out

    @classmethod
    def from_dict(cls, entries: list[dict]) -> "PropertySpace":
        props: list[PropertyDef] = []
        for e in entries:
            if e["kind"] == "discrete":
                props.append(DiscreteProperty(e["name"], tuple(e["vocab"])))
            elif e["kind"] == "continuous":
                props.append(ContinuousProperty(e["name"], int(e["dim"]), e.get("units", "")))
            else:
                raise SchemaError(f"unknown property kind {e['kind']!r}")
        return cls(props)


@dataclass
class Primitive:
    """One object's property bundle."""

    index: int
    values: dict[str, ValueType]


@dataclass
class SchemaInstance:
    """Ordered list of primitives describing one scene."""

    primitives: list[Primitive] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.primitives)


def validate_instance(inst: SchemaInstance, space: PropertySpace) -> None:
    """Raise SchemaError unless `inst` fully conforms to `space`."""
    expected = space.names()
    for pos, prim in enumerate(inst.primitives):
        if prim.index != pos:
            raise SchemaError(f"element index {prim.index} at position {pos}; indices must be 0..N-1 in order")
        got = list(prim.values.keys())
        if sorted(got) != sorted(expected):
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise SchemaError(
                f"element {pos}: arity mismatch (missing {missing or 'none'}, unexpected {extra or 'none'})"
            )
        for name in expected:
            prop = space[name]
            val = prim.values[name]
            if isinstance(prop, DiscreteProperty):
                if not isinstance(val, str) or val not in prop.vocab:
                    raise SchemaError(f"element {pos}: {val!r} not in vocabulary of <{name}>")
            else:
                if not isinstance(val, tuple) or len(val) != prop.dim:
                    raise SchemaError(
                        f"element {pos}: <{name}> expects {prop.dim} components, got {val!r}"
                    )


def _position(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    col = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return line, col


def _parse_value(raw: str, prop: PropertyDef, text: str, offset: int) -> ValueType:
    raw = " ".join(raw.split())
    if isinstance(prop, DiscreteProperty):
        if raw not in prop.vocab:
            line, col = _position(text, offset)
            raise SchemaError(f"{raw!r} is not in the vocabulary of <{prop.name}>", line, col)
        return raw
    if not (raw.startswith("(") and raw.endswith(")")):
        line, col = _position(text, offset)
        raise SchemaError(f"<{prop.name}> expects a parenthesized vector, got {raw!r}", line, col)
    body = raw[1:-1].strip()
    parts = [p.strip() for p in body.split(",")] if body else []
    if len(parts) != prop.dim:
        line, col = _position(text, offset)
        raise SchemaError(f"<{prop.name}> expects {prop.dim} components, got {len(parts)}", line, col)
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        line, col = _position(text, offset)
        raise SchemaError(f"<{prop.name}> has a non-numeric component in {raw!r}", line, col)


def parse_schema(text: str, space: PropertySpace) -> SchemaInstance:
    """Parse annotation text into a validated SchemaInstance."""
    primitives: list[Primitive] = []
    pos = 0
    n = len(text)

    def skip_ws(i: int) -> int:
        while i < n and text[i].isspace():
            i += 1
        return i

    while True:
        pos = skip_ws(pos)
        if pos >= n:
            break
        m = _TAG_RE.match(text, pos)
        if m is None or m.group(1) == "/" or m.group(2) != "element":
            line, col = _position(text, pos)
            raise SchemaError("expected an <element: i> opening tag", line, col)
        if m.group(3) is None:
            line, col = _position(text, pos)
            raise SchemaError("<element> tag is missing its index", line, col)
        index = int(m.group(3))
        if index != len(primitives):
            line, col = _position(text, pos)
            raise SchemaError(
                f"element index {index} out of order (expected {len(primitives)})", line, col
            )
        pos = m.end()

        values: dict[str, ValueType] = {}
        while True:
            pos = skip_ws(pos)
            if pos >= n:
                line, col = _position(text, n - 1 if n else 0)
                raise SchemaError("unclosed <element> block", line, col)
            m = _TAG_RE.match(text, pos)
            if m is None:
                line, col = _position(text, pos)
                raise SchemaError("expected a property tag or </element>", line, col)
            if m.group(1) == "/":
                if m.group(2) != "element":
                    line, col = _position(text, pos)
                    raise SchemaError(f"unexpected closing tag </{m.group(2)}>", line, col)
                pos = m.end()
                break
            name = m.group(2)
            open_at = pos
            if name not in space:
                line, col = _position(text, pos)
                raise SchemaError(f"unknown tag <{name}>", line, col)
            if name in values:
                line, col = _position(text, pos)
                raise SchemaError(f"duplicate tag <{name}> in element {index}", line, col)
            pos = m.end()
            close = re.compile(rf"<\s*/\s*{re.escape(name)}\s*>").search(text, pos)
            if close is None:
                line, col = _position(text, open_at)
                raise SchemaError(f"unclosed tag <{name}>", line, col)
            raw = text[pos : close.start()]
            if "<" in raw:
                line, col = _position(text, pos + raw.index("<"))
                raise SchemaError(f"nested tag inside <{name}>", line, col)
            values[name] = _parse_value(raw, space[name], text, pos)
            pos = close.end()

        # Canonical internal order follows the property space.
        ordered = {p.name: values[p.name] for p in space if p.name in values}
        missing = [p.name for p in space if p.name not in values]
        if missing:
            line, col = _position(text, pos - 1)
            raise SchemaError(f"element {index}: arity mismatch (missing {missing})", line, col)
        primitives.append(Primitive(index, ordered))

    inst = SchemaInstance(primitives)
    validate_instance(inst, space)
    return inst


def format_continuous(vec: tuple[float, ...]) -> str:
    return "(" + ", ".join(f"{v:.2f}" for v in vec) + ")"


def serialize_schema(inst: SchemaInstance, space: PropertySpace | None = None) -> str:
    """Canonical text form; inverse of parse_schema up to 2-decimal printing."""
    if space is not None:
        validate_instance(inst, space)
    lines: list[str] = []
    for prim in inst.primitives:
        names = space.names() if space is not None else list(prim.values.keys())
        lines.append(f"<element: {prim.index}>")
        for name in names:
            val = prim.values[name]
            rendered = val if isinstance(val, str) else format_continuous(val)
            lines.append(f"    <{name}> {rendered} </{name}>")
        lines.append("</element>")
    return "\n".join(lines)
