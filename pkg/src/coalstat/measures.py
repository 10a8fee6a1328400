"""Coalescent model families and their merger rate closed forms.

A family is a probability measure on [0, 1] driving a multiple-merger
coalescent. With that normalisation the pairwise coalescence rate is 1, so
time is measured in units of the expected pairwise coalescence time. The rate
at which a fixed set of k out of m lineages merges is the moment

    rate(m, k) = integral over [0, 1] of x^(k-2) (1-x)^(m-k) against the measure,

evaluated here in closed form per family (log-gamma based, stable for m in the
tens of thousands). The four-fold simultaneous-merger extension used by the
multi-locus machinery reweights the same moments over colourings into four
merger groups; see :func:`xi_fourfold_rate`.

Supported families: ``kingman`` (unit mass at 0), ``star`` (unit mass at 1),
``bs`` (uniform on [0, 1]), ``beta:ALPHA`` (Beta(2-alpha, alpha) with
0 < alpha < 2; alpha=1 coincides with ``bs``), ``pointmass:PSI`` (unit mass at
psi, 0 < psi <= 1), and ``twoatom:PSI`` (mass 2/(2+psi^2) at 0 plus
psi^2/(2+psi^2) at psi). Model wrappers add exponential growth on the Kingman
base (``growth:BETA``) and the four-fold simultaneous extension
(``xibeta:ALPHA``, ``xipointmass:PSI``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from .errors import ArgumentError, DomainError, SpecError

_FAMILY_KINDS = ("kingman", "star", "bs", "beta", "pointmass", "twoatom")


@dataclass(frozen=True)
class LambdaFamily:
    """One of the supported driving measures, identified by kind plus parameter."""

    kind: str
    alpha: float | None = None
    psi: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _FAMILY_KINDS:
            raise DomainError(f"unknown family kind {self.kind!r}")
        if self.kind == "beta":
            if self.alpha is None or not (0.0 < self.alpha < 2.0):
                raise DomainError(
                    f"beta family needs 0 < alpha < 2, got {self.alpha!r}"
                )
        elif self.alpha is not None:
            raise DomainError(f"{self.kind} family takes no alpha parameter")
        if self.kind in ("pointmass", "twoatom"):
            if self.psi is None or not (0.0 < self.psi <= 1.0):
                raise DomainError(
                    f"{self.kind} family needs 0 < psi <= 1, got {self.psi!r}"
                )
        elif self.psi is not None:
            raise DomainError(f"{self.kind} family takes no psi parameter")

    @property
    def atom_at_zero(self) -> float:
        """Mass the measure puts on {0} (the binary-merger component)."""
        if self.kind == "kingman":
            return 1.0
        if self.kind == "twoatom":
            return 2.0 / (2.0 + self.psi**2)
        return 0.0

    @property
    def spec_string(self) -> str:
        if self.kind == "beta":
            return f"beta:{self.alpha:g}"
        if self.kind in ("pointmass", "twoatom"):
            return f"{self.kind}:{self.psi:g}"
        return self.kind

    def __str__(self) -> str:
        return self.spec_string


KINGMAN = LambdaFamily("kingman")
STAR = LambdaFamily("star")
BOLTHAUSEN_SZNITMAN = LambdaFamily("bs")


def beta_coalescent(alpha: float) -> LambdaFamily:
    return LambdaFamily("beta", alpha=float(alpha))


def point_mass(psi: float) -> LambdaFamily:
    return LambdaFamily("pointmass", psi=float(psi))


def two_atom(psi: float) -> LambdaFamily:
    return LambdaFamily("twoatom", psi=float(psi))


def log_binom(m, k):
    """log of binomial(m, k), elementwise; -inf outside 0 <= k <= m."""
    m = np.asarray(m, dtype=float)
    k = np.asarray(k, dtype=float)
    with np.errstate(invalid="ignore"):
        out = gammaln(m + 1.0) - gammaln(k + 1.0) - gammaln(m - k + 1.0)
    return np.where((k >= 0) & (k <= m), out, -np.inf)


def log_moment_integral(family: LambdaFamily, a, c):
    """log of the integral of x^a (1-x)^c over (0, 1] against the family's measure.

    The atom at zero is deliberately excluded; callers add it separately where
    the merger pattern admits it. Accepts scalar or array exponents
    (nonnegative; a and c broadcast together); -inf marks a zero integral.
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    kind = family.kind
    if kind == "kingman":
        out = np.full(np.broadcast_shapes(a.shape, c.shape), -np.inf)
    elif kind == "star":
        out = np.where(c == 0, 0.0, -np.inf) + np.zeros_like(a)
    elif kind == "bs":
        out = betaln(a + 1.0, c + 1.0)
    elif kind == "beta":
        al = family.alpha
        out = betaln(a + 2.0 - al, c + al) - betaln(2.0 - al, al)
    else:
        psi = family.psi
        if psi == 1.0:
            out = np.where(c == 0, 0.0, -np.inf) + np.zeros_like(a)
        else:
            out = a * math.log(psi) + c * math.log1p(-psi)
        if kind == "twoatom":
            out = out + math.log(psi**2 / (2.0 + psi**2))
    if out.ndim == 0:
        return float(out)
    return out


def moment_integral(family: LambdaFamily, a, c):
    """Integral of x^a (1-x)^c over (0, 1] against the family's measure."""
    out = np.exp(log_moment_integral(family, a, c))
    if np.ndim(out) == 0:
        return float(out)
    return out


def lambda_rate(family: LambdaFamily, m: int, k: int) -> float:
    """Rate at which a fixed k-set out of m lineages merges, 2 <= k <= m."""
    if not (2 <= k <= m):
        raise ArgumentError(f"need 2 <= k <= m, got k={k}, m={m}")
    rate = moment_integral(family, k - 2, m - k)
    if k == 2:
        rate += family.atom_at_zero
    return float(rate)


def merger_weight_row(family: LambdaFamily, m: int) -> np.ndarray:
    """Vector of binomial(m, k) * lambda_rate(m, k) for k = 2..m.

    Entry [k-2] is the total rate of k-mergers out of m lineages. Computed in
    log space so m in the tens of thousands stays finite.
    """
    if m < 2:
        raise ArgumentError(f"need m >= 2, got m={m}")
    k = np.arange(2, m + 1, dtype=float)
    lb = log_binom(float(m), k)
    kind = family.kind
    if kind == "kingman":
        w = np.zeros(m - 1)
        w[0] = m * (m - 1) / 2.0
        return w
    if kind == "star":
        w = np.zeros(m - 1)
        w[-1] = 1.0
        return w
    if kind == "bs":
        return np.exp(lb + betaln(k - 1.0, m - k + 1.0))
    if kind == "beta":
        al = family.alpha
        return np.exp(lb + betaln(k - al, m - k + al) - betaln(2.0 - al, al))
    # pointmass / twoatom
    psi = family.psi
    if psi == 1.0:
        w = np.zeros(m - 1)
        w[-1] = 1.0
    else:
        w = np.exp(lb + (k - 2.0) * math.log(psi) + (m - k) * math.log1p(-psi))
    if kind == "twoatom":
        w = w * (psi**2 / (2.0 + psi**2))
        w[0] += family.atom_at_zero * m * (m - 1) / 2.0
    return w


def total_merge_rate(family: LambdaFamily, m: int) -> float:
    """Total rate at which the block count decreases from m lineages."""
    return float(merger_weight_row(family, m).sum())


_FALLING_FOUR = (1.0, 4.0, 12.0, 24.0, 24.0)  # 4!/(4-j)! for j = 0..4


def xi_fourfold_rate(family: LambdaFamily, b: int, groups, s: int) -> float:
    """Rate of one specific simultaneous merger pattern under the four-fold extension.

    From b current blocks, a pattern merges r disjoint groups of sizes
    ``groups`` (each >= 2, at most four of them) and leaves s = b - sum(groups)
    blocks untouched. The rate of any single such transition is the atom term
    (binary part, only when the pattern is one pair) plus colouring weights
    against the measure's moments; it depends on the pattern only through the
    group count and total group size.
    """
    groups = tuple(int(g) for g in groups)
    r = len(groups)
    if r == 0 or r > 4:
        raise ArgumentError(f"need 1 to 4 merger groups, got {r}")
    if any(g < 2 for g in groups):
        raise ArgumentError(f"every merger group needs >= 2 blocks, got {groups}")
    if s < 0 or sum(groups) + s != b:
        raise ArgumentError(
            f"pattern must account for all blocks: sum{groups} + {s} != {b}"
        )
    ksum = sum(groups)
    rate = 0.0
    if r == 1 and groups[0] == 2:
        rate += family.atom_at_zero
    lmax = min(s, 4 - r)
    ls = np.arange(0, lmax + 1)
    weights = (
        np.exp(log_binom(s, ls))
        * np.array([_FALLING_FOUR[r + l] for l in ls])
        / 4.0 ** (ksum + ls)
    )
    moments = moment_integral(family, ksum + ls - 2, s - ls)
    rate += 4.0 * float(np.dot(weights, np.atleast_1d(moments)))
    return rate


@dataclass(frozen=True)
class CoalescentModel:
    """A family plus how it is deployed: plain, with growth, or four-fold."""

    kind: str  # "lambda" | "growth" | "xi"
    family: LambdaFamily | None = None
    growth_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "growth":
            if self.family is not None:
                raise DomainError("growth models are Kingman-based; family must be None")
            if not (self.growth_rate >= 0.0) or not math.isfinite(self.growth_rate):
                raise DomainError(
                    f"growth rate must be finite and >= 0, got {self.growth_rate!r}"
                )
        elif self.kind in ("lambda", "xi"):
            if self.family is None:
                raise DomainError(f"{self.kind} model needs a family")
            if self.growth_rate != 0.0:
                raise DomainError(f"{self.kind} model takes no growth rate")
        else:
            raise DomainError(f"unknown model kind {self.kind!r}")

    @property
    def is_lambda(self) -> bool:
        return self.kind == "lambda"

    @property
    def is_growth(self) -> bool:
        return self.kind == "growth"

    @property
    def is_xi(self) -> bool:
        return self.kind == "xi"

    @property
    def spec_string(self) -> str:
        if self.kind == "lambda":
            return self.family.spec_string
        if self.kind == "growth":
            return f"growth:{self.growth_rate:g}"
        fam = self.family
        if fam.kind == "beta":
            return f"xibeta:{fam.alpha:g}"
        if fam.kind == "pointmass":
            return f"xipointmass:{fam.psi:g}"
        return f"xi:{fam.spec_string}"

    def __str__(self) -> str:
        return self.spec_string


def lambda_model(family: LambdaFamily) -> CoalescentModel:
    return CoalescentModel("lambda", family=family)


def growth_model(beta: float) -> CoalescentModel:
    return CoalescentModel("growth", growth_rate=float(beta))


def xi_model(family: LambdaFamily) -> CoalescentModel:
    return CoalescentModel("xi", family=family)


def _parse_number(token: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise SpecError(f"bad numeric parameter in model spec {token!r}") from None


def parse_family(token: str) -> LambdaFamily:
    """Parse a family spec token: kingman | star | bs | beta:A | pointmass:P | twoatom:P."""
    name, sep, arg = token.partition(":")
    if name in ("kingman", "star", "bs"):
        if sep:
            raise SpecError(f"family {name!r} takes no parameter (got {token!r})")
        return LambdaFamily(name)
    if name == "beta":
        if not sep:
            raise SpecError(f"family spec {token!r} needs a parameter, e.g. beta:1.5")
        return beta_coalescent(_parse_number(token, arg))
    if name in ("pointmass", "twoatom"):
        if not sep:
            raise SpecError(f"family spec {token!r} needs a parameter, e.g. {name}:0.5")
        return LambdaFamily(name, psi=_parse_number(token, arg))
    raise SpecError(f"unknown family spec {token!r}")


def parse_model(token: str) -> CoalescentModel:
    """Parse a model spec token.

    Grammar: any family token, or growth:BETA, xibeta:ALPHA, xipointmass:PSI.
    The form xi:FAMILY is also accepted for the remaining four-fold families
    (used when round-tripping spec strings).
    """
    name, sep, arg = token.partition(":")
    if name == "growth":
        if not sep:
            raise SpecError(f"model spec {token!r} needs a rate, e.g. growth:10")
        return growth_model(_parse_number(token, arg))
    if name == "xibeta":
        if not sep:
            raise SpecError(f"model spec {token!r} needs a parameter, e.g. xibeta:1.5")
        return xi_model(beta_coalescent(_parse_number(token, arg)))
    if name == "xipointmass":
        if not sep:
            raise SpecError(f"model spec {token!r} needs a parameter, e.g. xipointmass:0.5")
        return xi_model(point_mass(_parse_number(token, arg)))
    if name == "xi":
        if not sep:
            raise SpecError(f"model spec {token!r} needs a family, e.g. xi:twoatom:0.5")
        return xi_model(parse_family(arg))
    return lambda_model(parse_family(token))
