"""Forward/backward pass accounting in forward-pass units (xFP).

One backward pass costs two forward passes. A clean step is one FP and one
BP (3 xFP). Single-step attacks (fgsm, fgm) add one FP+BP; multi-step
attacks (pgd, freelb, smart) add S of each. Arithmetic goes through
``Fraction`` so table values such as 4.5 or 37.5% come out exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple

SINGLE_STEP = frozenset({"fgsm", "fgm"})
MULTI_STEP = frozenset({"pgd", "freelb", "smart"})
METHODS = SINGLE_STEP | MULTI_STEP
DISPLAY_NAMES = {"fgsm": "FGSM", "fgm": "FGM", "pgd": "PGD", "freelb": "FreeLB", "smart": "SMART"}


@dataclass
class CostLedger:
    fp: int = 0
    bp: int = 0

    def snapshot(self) -> "CostLedger":
        return CostLedger(self.fp, self.bp)

    def __sub__(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(self.fp - other.fp, self.bp - other.bp)

    @property
    def xfp(self) -> int:
        return xfp(self)


def xfp(ledger: CostLedger) -> int:
    return ledger.fp + 2 * ledger.bp


def _extra_passes(method: str, steps: int) -> int:
    """Forward (= backward) passes an attack adds on top of the clean pass."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if method in SINGLE_STEP:
        return 1
    if method in MULTI_STEP:
        return steps
    raise ValueError(f"unknown attack method {method!r}")


def per_batch_xfp(method: str, steps: int, attacked: bool) -> int:
    if not attacked:
        return 3
    return 3 + 3 * _extra_passes(method, steps)


def expected_xfp(method: str, steps: int, p_attack: float) -> float:
    return float(_expected_xfp(method, steps, Fraction(p_attack)))


def _expected_xfp(method: str, steps: int, p: Fraction) -> Fraction:
    _check_p(p)
    return 3 + p * 3 * _extra_passes(method, steps)


def expected_passes(method: str, steps: int, p_attack: float) -> float:
    """Expected FP (equivalently BP) count per batch."""
    p = Fraction(p_attack)
    _check_p(p)
    return float(1 + p * _extra_passes(method, steps))


def _check_p(p) -> None:
    if not 0 <= p <= 1:
        raise ValueError(f"p_attack must lie in [0, 1], got {float(p)}")


class Crr(NamedTuple):
    percent: float
    asymptotic: bool


def crr(method: str, steps: int, p_attack: float, asymptotic: bool = False) -> Crr:
    """Cost reduction of RAT at ``p_attack`` relative to always attacking.

    ``asymptotic`` takes S to infinity for multi-step methods, giving
    ``1 - p``. Single-step methods have no such limit; the finite value is
    returned with ``Crr.asymptotic`` False.
    """
    p = Fraction(p_attack)
    _check_p(p)
    if asymptotic and method in MULTI_STEP:
        return Crr(float((1 - p) * 100), True)
    extra = 3 * _extra_passes(method, steps)
    return Crr(float((1 - p) * extra / (3 + extra) * 100), False)


# ---------------------------------------------------------------------------
# symbolic table rows
# ---------------------------------------------------------------------------


def _fmt_num(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    return f"{float(x):g}"


def _affine(const: Fraction, coef: Fraction, sym: str = "S") -> str:
    if coef == 0:
        return _fmt_num(const)
    c = "" if coef == 1 else _fmt_num(coef)
    return f"{_fmt_num(const)}+{c}{sym}"


class CostRow(NamedTuple):
    regime: str
    method: str
    fp: str
    bp: str
    xfp: str
    crr: str


def cost_row(regime: str, method: str, p_attack: float = 0.5, steps: int | None = None) -> CostRow:
    """One row of the cost table.

    With ``steps=None`` multi-step rows stay symbolic in S (e.g. ``3+1.5S``)
    and CRR uses the S-to-infinity limit; with a concrete S everything is
    numeric.
    """
    if regime == "standard":
        return CostRow("Standard", "baseline", "1", "1", "3", "-")
    p = Fraction(1) if regime == "at" else Fraction(p_attack)
    _check_p(p)
    symbolic = steps is None and method in MULTI_STEP
    if symbolic:
        fp = _affine(Fraction(1), p)
        xf = _affine(Fraction(3), 3 * p)
    else:
        n = _extra_passes(method, steps or 1)
        fp = _fmt_num(1 + p * n)
        xf = _fmt_num(3 + 3 * p * n)
    if regime == "at":
        c = "-"
    else:
        val = crr(method, steps or 1, p, asymptotic=symbolic).percent
        c = f"{val:g}%"
    return CostRow(regime.upper(), DISPLAY_NAMES.get(method, method), fp, fp, xf, c)


def cost_table(methods: Iterable[str], p_attack: float = 0.5, steps: int | None = None) -> list[CostRow]:
    methods = [m for m in methods if m != "standard"]
    rows = [cost_row("standard", "baseline")]
    rows += [cost_row("at", m, steps=steps) for m in methods]
    rows += [cost_row("rat", m, p_attack, steps) for m in methods]
    return rows
