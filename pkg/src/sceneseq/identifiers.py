"""Object identifier tokens: formatting, ordering, parsing and token cost."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Optional

ID_KINDS = ("none", "plain_text", "single_token")

_NEAR_MISS = re.compile(r"<OBJ(\d*)>")


@dataclass(frozen=True)
class IdScheme:
    kind: str = "single_token"
    width: int = 3
    tokens_per_object_feature: int = 2

    def __post_init__(self):
        if self.kind not in ID_KINDS:
            raise ValueError(f"unknown id scheme {self.kind!r}; expected one of {ID_KINDS}")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.tokens_per_object_feature < 1:
            raise ValueError("tokens_per_object_feature must be >= 1")


@dataclass(frozen=True)
class IdAssignment:
    """``permutation[p]`` is the proposal index shown at 1-based position ``p + 1``."""

    permutation: tuple
    seed: Optional[int] = None

    def __post_init__(self):
        perm = tuple(int(i) for i in self.permutation)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError("permutation must be a bijection over 0..n-1")
        object.__setattr__(self, "permutation", perm)

    @property
    def n(self) -> int:
        return len(self.permutation)

    def proposal_at(self, position: int) -> int:
        if not 1 <= position <= self.n:
            raise IndexError(f"position {position} out of range 1..{self.n}")
        return self.permutation[position - 1]

    def position_of(self, proposal: int) -> int:
        try:
            return self.permutation.index(int(proposal)) + 1
        except ValueError:
            raise IndexError(f"proposal {proposal} not in assignment of {self.n} objects") from None


def make_id_token(position: int, width: int = 3) -> str:
    if not 1 <= position <= 10**width - 1:
        raise ValueError(f"position {position} outside 1..{10**width - 1} for width {width}")
    return f"<OBJ{position:0{width}d}>"


def assign_ids(n: int, policy: str = "fixed", seed: Optional[int] = None) -> IdAssignment:
    """Identity order, or a seeded Fisher-Yates shuffle."""
    if n < 1:
        raise ValueError("need at least one object")
    perm = list(range(n))
    if policy == "fixed":
        return IdAssignment(tuple(perm), seed)
    if policy != "random":
        raise ValueError(f"unknown order policy {policy!r}")
    if seed is None:
        raise ValueError("random order requires a seed")
    random.Random(seed).shuffle(perm)
    return IdAssignment(tuple(perm), seed)


def parse_id_tokens(text: str, width: int = 3, diagnostics: Optional[list] = None) -> list:
    """Find every well-formed ID token in ``text``.

    Returns ``(position, (start, end))`` pairs in textual order, where the
    span is in UTF-8 byte offsets. Near misses such as ``<OBJ13>`` are skipped
    and described in ``diagnostics`` when a list is supplied.
    """
    found = []
    for m in _NEAR_MISS.finditer(text):
        digits = m.group(1)
        if len(digits) != width or int(digits or 0) == 0:
            if diagnostics is not None:
                diagnostics.append(f"ignored malformed id token {m.group(0)!r} at char {m.start()}")
            continue
        start = len(text[: m.start()].encode("utf-8"))
        end = start + len(m.group(0))
        found.append((int(digits), (start, end)))
    return found


def parse_positions(text: str, width: int = 3) -> list:
    return [pos for pos, _ in parse_id_tokens(text, width)]


def token_cost(n: int, scheme="single_token") -> int:
    """Tokens spent on ``n`` objects, identifiers plus feature tokens.

    A plain-text id such as ``Obj001`` costs one token for ``Obj`` and one per digit.
    """
    if n < 0:
        raise ValueError("object count must be >= 0")
    if isinstance(scheme, str):
        scheme = IdScheme(kind=scheme)
    per_object = scheme.tokens_per_object_feature
    if scheme.kind == "plain_text":
        per_object += 1 + scheme.width
    elif scheme.kind == "single_token":
        per_object += 1
    return per_object * n
