"""Parser for the degradation-chain mini-language used on the command line.

Grammar (EBNF):

    chain  = [ op , { "," , op } ] ;
    op     = name , [ ":" , param , { "," , param } ] ;
    param  = key , "=" , number ;
    name   = ident ;  key = ident ;
    ident  = letter , { letter | digit | "_" } ;
    number = [ "-" ] , digits , [ "." , digits ] , [ ("e"|"E") , [sign] , digits ] ;

After a comma the parser looks ahead: `ident "="` continues the current
op's parameter list, anything else starts a new op. Example:

    "noise:sigma=0.2,rain:density=0.3,length=12,blur"
"""

from __future__ import annotations

import re

from .errors import ContractViolation

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if not self.eof() else ""

    def take(self, ch: str) -> None:
        if self.peek() != ch:
            raise ContractViolation(
                f"chain spec: expected {ch!r} at position {self.pos} in {self.text!r}"
            )
        self.pos += 1

    def match(self, pattern: re.Pattern) -> str:
        m = pattern.match(self.text, self.pos)
        if not m:
            raise ContractViolation(
                f"chain spec: bad token at position {self.pos} in {self.text!r}"
            )
        self.pos = m.end()
        return m.group(0)

    def lookahead_is_param(self, offset: int = 0) -> bool:
        m = _IDENT.match(self.text, self.pos + offset)
        return bool(m) and self.text[m.end() : m.end() + 1] == "="


def parse_chain_spec(text: str) -> list[tuple[str, dict[str, float]]]:
    """Parse a chain spec into (op name, params) pairs. Empty spec -> []."""
    text = text.strip()
    if not text:
        return []
    cur = _Cursor(text)
    ops = [_parse_op(cur)]
    while not cur.eof():
        cur.take(",")
        ops.append(_parse_op(cur))
    return ops


def _parse_op(cur: _Cursor) -> tuple[str, dict[str, float]]:
    name = cur.match(_IDENT)
    params: dict[str, float] = {}
    if cur.peek() == ":":
        cur.take(":")
        key, val = _parse_param(cur)
        params[key] = val
        while cur.peek() == "," and cur.lookahead_is_param(offset=1):
            cur.take(",")
            key, val = _parse_param(cur)
            params[key] = val
    return name, params


def _parse_param(cur: _Cursor) -> tuple[str, float]:
    key = cur.match(_IDENT)
    cur.take("=")
    raw = cur.match(_NUMBER)
    return key, float(raw)
