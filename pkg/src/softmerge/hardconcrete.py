"""Binary concrete and hard concrete distributions.

The concrete variable is sampled by reparameterization from uniform noise,

    s = logistic((logit(u) + log_alpha) / beta),

then stretched to (gamma, zeta) and clamped into [0, 1], which puts point masses
at exactly 0 and exactly 1. The CDF is the inverse of that map:

    F(s) = logistic(beta * logit(s) - log_alpha).

Scalar functions accept floats or numpy arrays. :func:`gate_tensor` is the
differentiable version used during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor, clip, sigmoid

GAMMA = -0.1
ZETA = 1.1
BETA = 0.5

# keeps logit(u) finite
_U_EPS = 1e-12


class DomainError(ValueError):
    pass


def logistic(x):
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def logit(p):
    if np.ndim(p) == 0:
        return math.log(p) - math.log1p(-p)
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GateParams:
    """Parameters of one hard concrete gate.

    ``beta`` is stored through an unconstrained ``u_beta`` with
    ``beta = logistic(u_beta)``, so gradient steps on ``u_beta`` keep the
    temperature inside (0, 1).
    """

    log_alpha: float = 0.0
    u_beta: float = 0.0
    gamma: float = GAMMA
    zeta: float = ZETA

    def __post_init__(self):
        if not math.isfinite(self.log_alpha):
            raise DomainError(f"log_alpha must be finite, got {self.log_alpha}")
        if not (self.gamma < 0):
            raise DomainError(f"gamma must be < 0, got {self.gamma}")
        if not (self.zeta > 1):
            raise DomainError(f"zeta must be > 1, got {self.zeta}")
        b = self.beta
        if not (0.0 < b < 1.0):
            raise DomainError(f"beta must lie in (0, 1), got {b}")

    @classmethod
    def make(cls, log_alpha: float = 0.0, beta: float = BETA, gamma: float = GAMMA, zeta: float = ZETA):
        if not (0.0 < beta < 1.0):
            raise DomainError(f"beta must lie in (0, 1), got {beta}")
        return cls(float(log_alpha), float(logit(beta)), float(gamma), float(zeta))

    @property
    def beta(self) -> float:
        return logistic(self.u_beta)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


def _check_open_unit(x, name: str):
    arr = np.asarray(x)
    if not np.all((arr > 0) & (arr < 1)):
        raise DomainError(f"{name} must lie in the open interval (0, 1)")


def concrete_pdf(s, p: GateParams):
    _check_open_unit(s, "s")
    s = np.asarray(s, dtype=np.float64)
    b = p.beta
    # log-space to survive alpha**2 and s**(beta-1) extremes
    log_num = p.log_alpha + math.log(b) + (b - 1) * (np.log(s) + np.log1p(-s))
    log_den = 2 * np.logaddexp(b * np.log(s), p.log_alpha + b * np.log1p(-s))
    out = np.exp(log_num - log_den)
    return float(out) if out.ndim == 0 else out


def concrete_cdf(s, p: GateParams):
    _check_open_unit(s, "s")
    return logistic(p.beta * logit(s) - p.log_alpha)


def sample_concrete(p: GateParams, u):
    _check_open_unit(u, "u")
    return logistic((logit(u) + p.log_alpha) / p.beta)


def stretch_and_fold(s, p: GateParams):
    _check_open_unit(s, "s")
    s_bar = np.asarray(s) * p.zeta + (1 - np.asarray(s)) * p.gamma
    g = np.minimum(1.0, np.maximum(0.0, s_bar))
    return float(g) if np.ndim(g) == 0 else g


def prob_zero(p: GateParams) -> float:
    return concrete_cdf(-p.gamma / (p.zeta - p.gamma), p)


def prob_one(p: GateParams) -> float:
    return 1.0 - concrete_cdf((1 - p.gamma) / (p.zeta - p.gamma), p)


def hard_concrete_density(g, p: GateParams):
    """Density of the continuous part of the gate on (0, 1), excluding point masses."""
    width = p.zeta - p.gamma
    return concrete_pdf((np.asarray(g) - p.gamma) / width, p) / width


def sample_gate(p: GateParams, u):
    return stretch_and_fold(sample_concrete(p, u), p)


def deterministic_gate(p: GateParams) -> float:
    return min(1.0, max(0.0, logistic(p.log_alpha) * (p.zeta - p.gamma) + p.gamma))


def uniform_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.random(shape), _U_EPS, 1.0 - _U_EPS)


# vectorized forms over arrays of parameters ------------------------------


def deterministic_gates(log_alpha: np.ndarray, gamma: float = GAMMA, zeta: float = ZETA) -> np.ndarray:
    return np.clip(logistic(np.asarray(log_alpha, dtype=np.float64)) * (zeta - gamma) + gamma, 0.0, 1.0)


def gate_tensor(log_alpha: Tensor, u_beta: Tensor, u: np.ndarray, gamma: float = GAMMA, zeta: float = ZETA) -> Tensor:
    """Hard concrete samples as a differentiable function of ``log_alpha`` and ``u_beta``.

    All arguments broadcast elementwise; ``u`` is fixed noise.
    """
    _check_open_unit(u, "u")
    beta = sigmoid(u_beta)
    s = sigmoid((log_alpha + logit(np.asarray(u, dtype=np.float64))) / beta)
    return clip(s * (zeta - gamma) + gamma, 0.0, 1.0)
