"""Dempster-Shafer algebra on the binary frame {0, 1}.

Masses live on the three non-empty subsets {0}, {1} and the whole frame.
The empty set always carries zero mass and is not stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConflictError, DomainError

MASS_TOL = 1e-9
CONFLICT_LIMIT = 1.0 - 1e-12


@dataclass(frozen=True)
class BinaryMass:
    """Mass function over {absent}, {present} and the frame (ignorance)."""

    m0: float
    m1: float
    m_omega: float = 0.0

    def __post_init__(self):
        parts = (self.m0, self.m1, self.m_omega)
        if not all(math.isfinite(x) for x in parts):
            raise DomainError(f"non-finite mass component in {parts}")
        if min(parts) < 0.0:
            raise DomainError(f"negative mass component in {parts}")
        if abs(sum(parts) - 1.0) > MASS_TOL:
            raise DomainError(f"masses sum to {sum(parts)!r}, expected 1")

    @property
    def is_bayesian(self) -> bool:
        return self.m_omega == 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.m0, self.m1, self.m_omega)


@dataclass(frozen=True)
class FusedMass:
    mass: BinaryMass
    conflict: float


def vacuous() -> BinaryMass:
    """Total ignorance; the neutral element of Dempster's rule."""
    return BinaryMass(0.0, 0.0, 1.0)


def mass_from_prob(p: float) -> BinaryMass:
    """Bayesian mass with ``p`` on {1} and ``1 - p`` on {0}."""
    if not (0.0 <= p <= 1.0):
        raise DomainError(f"probability {p!r} outside [0, 1]")
    return BinaryMass(1.0 - p, p, 0.0)


def combine(a: BinaryMass, b: BinaryMass) -> FusedMass:
    """Dempster's rule of combination.

    The conflict is the product mass falling on the empty intersection,
    ``{0} & {1}``. Surviving products are renormalized by ``1 - conflict``,
    computed as their own sum so the result stays normalized even when
    the conflict is close to one.

    Raises:
        ConflictError: if the two masses are (numerically) totally
            contradictory, e.g. certain presence against certain absence.
    """
    conflict = a.m0 * b.m1 + a.m1 * b.m0
    if conflict >= CONFLICT_LIMIT:
        raise ConflictError(f"total conflict between {a} and {b} (kappa={conflict!r})")
    s0 = a.m0 * b.m0 + a.m0 * b.m_omega + a.m_omega * b.m0
    s1 = a.m1 * b.m1 + a.m1 * b.m_omega + a.m_omega * b.m1
    s_omega = a.m_omega * b.m_omega
    norm = s0 + s1 + s_omega
    if norm <= 0.0:
        raise ConflictError(f"total conflict between {a} and {b}")
    m0, m1, m_omega = s0 / norm, s1 / norm, s_omega / norm
    return FusedMass(BinaryMass(m0, m1, m_omega), conflict)


def prob_from_mass(m: BinaryMass) -> float:
    """Pignistic probability of presence; ignorance is split evenly."""
    return m.m1 + 0.5 * m.m_omega
