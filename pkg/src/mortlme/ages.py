"""Age groups and age grids.

An age grid is an ordered tuple of disjoint :class:`AgeGroup` intervals.
The terminal group may be open-ended (e.g. ``110+``), which is how
published rate tables close the age range without choosing an upper
bound.  Life tables require an open terminal group; pure forecasting
panels (e.g. a 0-100 comparison grid) may end on a closed group.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ValidationError

#: Sentinel width for an open-ended terminal group.
OPEN = None


@dataclass(frozen=True)
class AgeGroup:
    """One age interval: ``[lower, lower+width-1]``, or ``lower+`` if open.

    ``width`` is the number of single-year ages covered; ``None`` (OPEN)
    marks the open-ended terminal group.
    """

    lower: int
    width: int | None

    def __post_init__(self) -> None:
        if self.lower < 0:
            raise ValidationError(f"age group lower bound must be >= 0, got {self.lower}")
        if self.width is not None and self.width < 1:
            raise ValidationError(f"age group width must be >= 1 or OPEN, got {self.width}")

    @property
    def is_open(self) -> bool:
        return self.width is None

    @property
    def upper(self) -> int | None:
        """Last single-year age covered, or None for an open group."""
        return None if self.width is None else self.lower + self.width - 1

    @property
    def label(self) -> str:
        if self.is_open:
            return f"{self.lower}+"
        if self.width == 1:
            return str(self.lower)
        return f"{self.lower}-{self.upper}"

    @classmethod
    def from_label(cls, label: str) -> "AgeGroup":
        """Parse ``"0"``, ``"1-4"``, or ``"110+"`` style labels."""
        label = label.strip()
        if label.endswith("+"):
            return cls(int(label[:-1]), OPEN)
        m = re.fullmatch(r"(\d+)-(\d+)", label)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            return cls(lo, hi - lo + 1)
        if label.isdigit():
            return cls(int(label), 1)
        raise ValidationError(f"unrecognized age label {label!r}")

    def __str__(self) -> str:
        return self.label


def validate_grid(groups: tuple[AgeGroup, ...] | list[AgeGroup]) -> tuple[AgeGroup, ...]:
    """Check ordering/disjointness and return the grid as a tuple.

    Groups must be strictly increasing in lower bound with no overlap.
    At most one group may be open, and it must come last.
    """
    grid = tuple(groups)
    if not grid:
        raise ValidationError("age grid is empty")
    for a, b in zip(grid, grid[1:]):
        if a.is_open:
            raise ValidationError(f"open group {a} must be the last group in the grid")
        if b.lower <= a.upper:
            raise ValidationError(f"age groups {a} and {b} overlap or are out of order")
    return grid


def five_year_grid(last_lower: int = 110, open_terminal: bool = True) -> tuple[AgeGroup, ...]:
    """Conventional 5x1 grid: 0, 1-4, 5-9, ..., with terminal at ``last_lower``.

    With the defaults this is the 24-group grid 0, 1-4, 5-9, ..., 105-109,
    110+.  ``open_terminal=False`` makes the last group a closed 5-year
    interval instead (used for truncated comparison grids).
    """
    if last_lower < 5 or last_lower % 5 != 0:
        raise ValidationError(f"last_lower must be a positive multiple of 5, got {last_lower}")
    groups = [AgeGroup(0, 1), AgeGroup(1, 4)]
    groups += [AgeGroup(lo, 5) for lo in range(5, last_lower, 5)]
    groups.append(AgeGroup(last_lower, OPEN if open_terminal else 5))
    return validate_grid(groups)


def single_year_grid(first: int = 0, last_lower: int = 110, open_terminal: bool = True) -> tuple[AgeGroup, ...]:
    """Single-year ages ``first..last_lower-1`` plus a terminal group at ``last_lower``."""
    if last_lower <= first:
        raise ValidationError(f"last_lower must exceed first, got {first}..{last_lower}")
    groups = [AgeGroup(a, 1) for a in range(first, last_lower)]
    groups.append(AgeGroup(last_lower, OPEN if open_terminal else 1))
    return validate_grid(groups)


def grid_from_spec(spec: str) -> tuple[AgeGroup, ...]:
    """Build a grid from a compact config string.

    Accepted forms:
      * ``"5x1"`` — the standard 24-group grid up to 110+.
      * ``"1x1"`` — single-year ages 0..109 plus 110+.
      * ``"1x1:45-110"`` — single-year ages over a sub-range, open terminal.
      * ``"5x1:0-100"`` — 5-year groups with closed terminal at the given bound.
      * comma-separated labels, e.g. ``"0,1-4,5-9,10+"``.
    """
    spec = spec.strip()
    if spec == "5x1":
        return five_year_grid()
    if spec == "1x1":
        return single_year_grid()
    m = re.fullmatch(r"(5x1|1x1):(\d+)-(\d+)", spec)
    if m:
        kind, lo, hi = m.group(1), int(m.group(2)), int(m.group(3))
        if kind == "1x1":
            return single_year_grid(lo, hi)
        if lo != 0:
            raise ValidationError(f"5x1 grids start at age 0, got {spec!r}")
        # A truncated 5x1 grid ends on a closed 5-year group: there is no
        # published rate for a pooled terminal below 110.
        return five_year_grid(hi, open_terminal=False)
    if "," in spec:
        return validate_grid([AgeGroup.from_label(tok) for tok in spec.split(",")])
    raise ValidationError(f"unrecognized age grid spec {spec!r}")
