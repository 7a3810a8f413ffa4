from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from design_types import LinkKind
from errors import LinkDomainError

# Means are pulled this far inside (0, 1) before nuisance evaluations of g and g'
MU_GUARD = 1e-6


@dataclass(frozen=True)
class Link:
    """
    A smooth strictly increasing link g defining the estimand delta = g(mu1) - g(mu0).

    :param kind: Which link function.
    """
    kind: LinkKind

    def in_domain(self, mu) -> bool:
        """
        Check whether every value of mu lies in the link's domain.

        :param mu: Scalar or array of means.
        :return: True if all values are valid.
        """
        mu = np.asarray(mu, dtype=float)
        if not np.all(np.isfinite(mu)):
            return False
        match self.kind:
            case LinkKind.identity:
                return True
            case LinkKind.log:
                return bool(np.all(mu > 0))
            case LinkKind.logit:
                return bool(np.all((mu > 0) & (mu < 1)))
            case _:
                raise ValueError(f'Unknown link: {self.kind}')

    def _check(self, mu) -> np.ndarray:
        if not self.in_domain(mu):
            raise LinkDomainError(f'{self.kind.value} link is undefined at mu={mu}')
        return np.asarray(mu, dtype=float)

    def value(self, mu):
        """
        Evaluate g(mu).

        :param mu: Scalar or array in the link domain.
        :return: g(mu), same shape as mu.
        """
        mu = self._check(mu)
        match self.kind:
            case LinkKind.identity:
                result = mu.copy()
            case LinkKind.log:
                result = np.log(mu)
            case LinkKind.logit:
                result = logit(mu)
        return float(result) if result.ndim == 0 else result

    def deriv(self, mu):
        """
        Evaluate g'(mu).

        :param mu: Scalar or array in the link domain.
        :return: g'(mu) > 0, same shape as mu.
        """
        mu = self._check(mu)
        match self.kind:
            case LinkKind.identity:
                result = np.ones_like(mu)
            case LinkKind.log:
                result = 1.0 / mu
            case LinkKind.logit:
                result = 1.0 / (mu * (1.0 - mu))
        return float(result) if result.ndim == 0 else result

    def guard(self, mu: float) -> float:
        """
        Pull an estimated mean inside the link domain so that g and g' stay finite.
        Identity means are returned unchanged.

        :param mu: Estimated mean.
        :return: Guarded mean.
        """
        match self.kind:
            case LinkKind.identity:
                return float(mu)
            case LinkKind.log:
                return float(max(mu, MU_GUARD))
            case LinkKind.logit:
                return float(min(max(mu, MU_GUARD), 1.0 - MU_GUARD))
            case _:
                raise ValueError(f'Unknown link: {self.kind}')

    @classmethod
    def from_name(cls, name: str) -> 'Link':
        for kind in LinkKind:
            if kind.value.lower() == name.lower() or kind.name == name.lower():
                return cls(kind)
        raise ValueError(f'Unknown link: {name}')


def link_value(link: Link, mu: float) -> float:
    return link.value(mu)


def link_deriv(link: Link, mu: float) -> float:
    return link.deriv(mu)


def treatment_effect(link: Link, mu1: float, mu0: float) -> float:
    """
    Treatment effect on the link scale.

    :param link: Link function g.
    :param mu1: Mean under the experimental arm.
    :param mu0: Mean under the control arm.
    :return: g(mu1) - g(mu0).
    """
    return link.value(mu1) - link.value(mu0)
