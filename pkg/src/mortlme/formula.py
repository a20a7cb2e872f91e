"""Declarative model formulas for the mortality mixed models.

A formula lists fixed terms and random terms.  Fixed terms are drawn
from:

  ``"age"``                   age-group dummies (first group is the reference)
  ``"gender:age"``            male-by-age dummies (Female is the reference)
  ``"kt"``, ``"kt2"``, ...    powers of the global trend covariate
  ``"gender:age:kc"``, ``"gender:age:kc2"``, ...
                              gender-by-age interactions with powers of the
                              country segmented trend covariate
  ``"cohort"``                year minus age-group lower bound
  any other identifier        an extra panel column (e.g. ``"gdp"``)

The intercept is always included and never removable.  Random terms
pair a grouping key (columns from country/gender/age, e.g.
``"country:gender:age"``) with regressors from ``"intercept"``,
``"kt"`` powers, ``"cohort"``, or an extra covariate name.  Every
non-intercept random regressor must also appear as a fixed term:
random effects are centered, so any nonzero mean must be carried by
the fixed part.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from .errors import ValidationError

GROUP_COLUMNS = ("country", "gender", "age")

_KT_RE = re.compile(r"kt(\d*)")
_KC_RE = re.compile(r"gender:age:kc(\d*)")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def kt_degree(term: str) -> int | None:
    """Degree j for a ``kt``/``kt2``/... term, else None."""
    m = _KT_RE.fullmatch(term)
    if not m:
        return None
    return int(m.group(1)) if m.group(1) else 1


def kc_degree(term: str) -> int | None:
    """Degree j for a ``gender:age:kc``/``gender:age:kc2``/... term, else None."""
    m = _KC_RE.fullmatch(term)
    if not m:
        return None
    return int(m.group(1)) if m.group(1) else 1


def is_extra_covariate(term: str) -> bool:
    """True for terms that name an extra panel column."""
    if term in ("age", "gender:age", "cohort", "intercept"):
        return False
    if kt_degree(term) is not None or kc_degree(term) is not None:
        return False
    return _NAME_RE.fullmatch(term) is not None


def _validate_fixed_term(term: str) -> None:
    if term in ("age", "gender:age", "cohort"):
        return
    if kt_degree(term) is not None or kc_degree(term) is not None:
        return
    if is_extra_covariate(term):
        return
    raise ValidationError(f"unknown fixed term {term!r}")


def _validate_random_regressor(name: str) -> None:
    if name in ("intercept", "cohort"):
        return
    if kt_degree(name) is not None:
        return
    if is_extra_covariate(name):
        return
    raise ValidationError(f"unknown random regressor {name!r}")


def _as_group_key(group: str | tuple[str, ...]) -> tuple[str, ...]:
    key = tuple(group.split(":")) if isinstance(group, str) else tuple(group)
    if not key:
        raise ValidationError("empty grouping key")
    for col in key:
        if col not in GROUP_COLUMNS:
            raise ValidationError(f"grouping key column {col!r} not one of {GROUP_COLUMNS}")
    if len(set(key)) != len(key):
        raise ValidationError(f"duplicate columns in grouping key {key}")
    return key


@dataclass(frozen=True)
class RandomTerm:
    """One grouped random-effect term: regressors varying by group level."""

    group: tuple[str, ...]
    regressors: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "group", _as_group_key(self.group))
        regs = tuple(self.regressors)
        if not regs:
            raise ValidationError(f"random term {self.group} has no regressors")
        if len(set(regs)) != len(regs):
            raise ValidationError(f"duplicate regressors in random term {self.group}")
        for name in regs:
            _validate_random_regressor(name)
        object.__setattr__(self, "regressors", regs)

    @property
    def label(self) -> str:
        return f"({' + '.join(self.regressors)} | {':'.join(self.group)})"


@dataclass(frozen=True)
class ModelFormula:
    """Fixed terms plus grouped random terms (intercept always fixed)."""

    fixed: tuple[str, ...]
    random: tuple[RandomTerm, ...]

    def __post_init__(self) -> None:
        fixed = tuple(t for t in self.fixed if t != "intercept")
        if len(set(fixed)) != len(fixed):
            raise ValidationError("duplicate fixed terms")
        for term in fixed:
            _validate_fixed_term(term)
        object.__setattr__(self, "fixed", fixed)
        random = tuple(self.random)
        if not random:
            raise ValidationError("at least one random term is required")
        if len({t.group for t in random}) != len(random):
            raise ValidationError("duplicate random grouping keys")
        for term in random:
            for reg in term.regressors:
                if reg != "intercept" and reg not in fixed:
                    raise ValidationError(
                        f"random regressor {reg!r} has no fixed counterpart; "
                        "centered random effects need the mean carried by a fixed term"
                    )
        object.__setattr__(self, "random", random)

    def describe(self) -> str:
        parts = ["intercept", *self.fixed, *[t.label for t in self.random]]
        return " + ".join(parts)

    def to_dict(self) -> dict:
        return {
            "fixed": list(self.fixed),
            "random": [
                {"group": ":".join(t.group), "regressors": list(t.regressors)}
                for t in self.random
            ],
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "ModelFormula":
        try:
            fixed = tuple(spec["fixed"])
            random = tuple(
                RandomTerm(t["group"], tuple(t["regressors"])) for t in spec["random"]
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed formula spec: {exc}") from exc
        return cls(fixed, random)

    # -- edits used by stepwise selection ---------------------------------

    def drop_fixed(self, term: str) -> "ModelFormula":
        if term not in self.fixed:
            raise ValidationError(f"fixed term {term!r} not in formula")
        return replace(self, fixed=tuple(t for t in self.fixed if t != term))

    def drop_random_regressor(self, group: tuple[str, ...], regressor: str) -> "ModelFormula":
        new_terms = []
        found = False
        for term in self.random:
            if term.group == group and regressor in term.regressors:
                found = True
                remaining = tuple(r for r in term.regressors if r != regressor)
                if remaining:
                    new_terms.append(RandomTerm(term.group, remaining))
            else:
                new_terms.append(term)
        if not found:
            raise ValidationError(f"random regressor {regressor!r} not in term {group}")
        if not new_terms:
            raise ValidationError("cannot drop the last random term")
        return replace(self, random=tuple(new_terms))

    def removable_fixed(self) -> list[str]:
        """Fixed terms whose removal keeps the random/fixed hierarchy valid."""
        locked = {reg for term in self.random for reg in term.regressors}
        return [t for t in self.fixed if t not in locked]

    def random_regressor_pairs(self) -> list[tuple[tuple[str, ...], str]]:
        return [(term.group, reg) for term in self.random for reg in term.regressors]


def multi_population_formula(degree: int = 2, cohort: bool = True) -> ModelFormula:
    """The maximal pooled model: age and gender-age effects, polynomial
    trend terms up to ``degree``, optional cohort, and random
    trend/cohort slopes by country:gender:age."""
    if degree < 1:
        raise ValidationError(f"degree must be >= 1, got {degree}")
    fixed: list[str] = ["age", "gender:age"]
    regressors: list[str] = ["intercept"]
    for j in range(1, degree + 1):
        suffix = "" if j == 1 else str(j)
        fixed += [f"kt{suffix}", f"gender:age:kc{suffix}"]
        regressors.append(f"kt{suffix}")
    if cohort:
        fixed.append("cohort")
        regressors.append("cohort")
    term = RandomTerm(("country", "gender", "age"), tuple(regressors))
    return ModelFormula(tuple(fixed), (term,))


def selected_multi_population_formula() -> ModelFormula:
    """The reduced pooled model kept by backward selection on the
    12-population panel: the linear global-trend term drops from both
    the fixed and the random part."""
    return (
        multi_population_formula(degree=2, cohort=True)
        .drop_random_regressor(("country", "gender", "age"), "kt")
        .drop_fixed("kt")
    )


def single_population_formula() -> ModelFormula:
    """Random-intercept-and-slope model on the global trend, grouped by age."""
    return ModelFormula(
        fixed=("kt",),
        random=(RandomTerm(("age",), ("intercept", "kt")),),
    )
