"""Hard Concrete head gates and the L0 relaxation used to prune heads.

A gate is sampled as

    s    = sigmoid((log u - log(1 - u) + log_alpha) / beta)
    sbar = s * (zeta - gamma) + gamma
    g    = min(1, max(0, sbar))

so it has point masses at 0 and 1.  The closed forms below follow from the
CDF of the binary Concrete variable, P(s <= x) = sigmoid(beta*logit(x) - log_alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import integrate
from scipy.special import expit as _sigmoid

from . import autodiff as ad
from .model import ATTENTION_TYPES, HeadId

BETA = 2.0 / 3.0
GAMMA = -0.1
ZETA = 1.1
INIT_LOG_ALPHA = 2.0
NOISE_EPS = 1e-6


@dataclass(frozen=True)
class HardConcreteParams:
    log_alpha: float
    beta: float = BETA
    gamma: float = GAMMA
    zeta: float = ZETA

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"temperature must be positive, got {self.beta}")
        if not self.gamma < 0:
            raise ValueError(f"gamma must be negative, got {self.gamma}")
        if not self.zeta > 1:
            raise ValueError(f"zeta must exceed 1, got {self.zeta}")


def sample_gate(log_alpha, u, beta: float = BETA, gamma: float = GAMMA, zeta: float = ZETA):
    """Reparameterized Hard Concrete sample.

    ``log_alpha`` may be a float, an array, or a :class:`Tensor`; a Tensor
    input gives a Tensor output differentiable in ``log_alpha``.  ``u`` must
    lie in (0, 1); it is clamped to (1e-6, 1 - 1e-6) before the logit.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("noise u must lie strictly inside (0, 1)")
    u = np.clip(u, NOISE_EPS, 1 - NOISE_EPS)
    noise = np.log(u) - np.log1p(-u)
    if isinstance(log_alpha, ad.Tensor):
        s = ad.sigmoid(ad.scale(ad.add(log_alpha, ad.Tensor(noise)), 1.0 / beta))
        stretched = ad.add(ad.scale(s, zeta - gamma), ad.Tensor(np.full(s.shape, gamma)))
        return ad.clamp(stretched, 0.0, 1.0)
    s = _sigmoid((noise + np.asarray(log_alpha, dtype=np.float64)) / beta)
    g = np.clip(s * (zeta - gamma) + gamma, 0.0, 1.0)
    return float(g) if g.ndim == 0 else g


def prob_zero(log_alpha, beta: float = BETA, gamma: float = GAMMA, zeta: float = ZETA):
    """P(g = 0)."""
    return _sigmoid(beta * math.log(-gamma / zeta) - np.asarray(log_alpha, dtype=np.float64))


def prob_one(log_alpha, beta: float = BETA, gamma: float = GAMMA, zeta: float = ZETA):
    """P(g = 1) = 1 - CDF of the stretched variable at 1."""
    return _sigmoid(np.asarray(log_alpha, dtype=np.float64) - beta * math.log((1 - gamma) / (zeta - 1)))


def prob_nonzero(log_alpha, beta: float = BETA, gamma: float = GAMMA, zeta: float = ZETA):
    """1 - P(g = 0) = sigmoid(log_alpha - beta * log(-gamma / zeta))."""
    if isinstance(log_alpha, ad.Tensor):
        shift = beta * math.log(-gamma / zeta)
        return ad.sigmoid(ad.add(log_alpha, ad.Tensor(np.full(log_alpha.shape, -shift))))
    return _sigmoid(np.asarray(log_alpha, dtype=np.float64) - beta * math.log(-gamma / zeta))


def expected_gate(log_alpha: float, beta: float = BETA, gamma: float = GAMMA, zeta: float = ZETA) -> float:
    """E[g] = integral over t in (0, 1) of P(g > t), by adaptive quadrature."""

    def survival(t):
        x = (t - gamma) / (zeta - gamma)
        return 1.0 - float(_sigmoid(beta * math.log(x / (1 - x)) - log_alpha))

    value, _ = integrate.quad(survival, 0.0, 1.0, epsabs=1e-12, epsrel=1e-10, limit=200)
    return value


def l0_exact(gate_values) -> int:
    """Number of strictly nonzero gates."""
    return int(np.count_nonzero(np.asarray(gate_values, dtype=np.float64)))


@dataclass
class GateSet:
    """Per-head ``log_alpha`` for each gated (attention_type, layer).

    ``log_alpha[(attention_type, layer)]`` is a length-h parameter Tensor.
    """

    num_layers: int
    num_heads: int
    gated_types: tuple[str, ...]
    beta: float = BETA
    gamma: float = GAMMA
    zeta: float = ZETA
    log_alpha: dict[tuple[str, int], ad.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        HardConcreteParams(0.0, self.beta, self.gamma, self.zeta)
        for t in self.gated_types:
            if t not in ATTENTION_TYPES:
                raise ValueError(f"unknown attention type {t!r}")
        for key in self.keys():
            if key not in self.log_alpha:
                self.log_alpha[key] = ad.parameter(np.full(self.num_heads, INIT_LOG_ALPHA),
                                                   name=f"gate.{key[0]}.{key[1]}")

    @classmethod
    def create(cls, num_layers: int, num_heads: int, gated_types: Iterable[str],
               init: float = INIT_LOG_ALPHA, **consts) -> "GateSet":
        gs = cls(num_layers, num_heads, tuple(gated_types), **consts)
        for t in gs.log_alpha.values():
            t.data[...] = init
        return gs

    def keys(self):
        return [(t, l) for t in self.gated_types for l in range(self.num_layers)]

    def head_ids(self) -> list[HeadId]:
        return [HeadId(t, l, h) for t, l in self.keys() for h in range(self.num_heads)]

    def params(self) -> list[ad.Tensor]:
        return [self.log_alpha[k] for k in self.keys()]

    def params_of(self, head: HeadId) -> HardConcreteParams:
        return HardConcreteParams(float(self.log_alpha[(head.attention_type, head.layer)].data[head.head]),
                                  self.beta, self.gamma, self.zeta)

    def _consts(self):
        return dict(beta=self.beta, gamma=self.gamma, zeta=self.zeta)

    def sample(self, rng: np.random.Generator) -> dict[tuple[str, int], ad.Tensor]:
        """One differentiable gate draw per head (shared by a whole batch)."""
        out = {}
        for key in self.keys():
            u = rng.uniform(NOISE_EPS, 1 - NOISE_EPS, size=self.num_heads)
            out[key] = sample_gate(self.log_alpha[key], u, **self._consts())
        return out

    def sample_with_noise(self, noise: Mapping[tuple[str, int], np.ndarray]) -> dict[tuple[str, int], ad.Tensor]:
        return {key: sample_gate(self.log_alpha[key], noise[key], **self._consts()) for key in self.keys()}

    def l_c(self) -> ad.Tensor:
        """Differentiable sum over heads of P(g != 0)."""
        total = None
        for key in self.keys():
            term = ad.sum_all(prob_nonzero(self.log_alpha[key], **self._consts()))
            total = term if total is None else ad.add(total, term)
        if total is None:
            raise ValueError("l_c of an empty gate set")
        return total

    def prob_zero(self) -> dict[tuple[str, int], np.ndarray]:
        return {k: prob_zero(self.log_alpha[k].data, **self._consts()) for k in self.keys()}

    def prob_one(self) -> dict[tuple[str, int], np.ndarray]:
        return {k: prob_one(self.log_alpha[k].data, **self._consts()) for k in self.keys()}

    def discretize(self) -> dict[tuple[str, int], np.ndarray]:
        """Test-time gates: 1 where P(g=1) > P(g=0), else 0 (ties prune)."""
        out = {}
        for k in self.keys():
            p0 = prob_zero(self.log_alpha[k].data, **self._consts())
            p1 = prob_one(self.log_alpha[k].data, **self._consts())
            out[k] = (p1 > p0).astype(np.float64)
        return out

    def binarized_fraction(self, threshold: float = 0.9) -> float:
        """Share of gates with max(P(g=0), P(g=1)) above ``threshold``."""
        p0 = np.concatenate([v for v in self.prob_zero().values()])
        p1 = np.concatenate([v for v in self.prob_one().values()])
        return float(np.mean(np.maximum(p0, p1) > threshold))

    def retained_counts(self) -> dict[str, int]:
        disc = self.discretize()
        counts = {t: 0 for t in ATTENTION_TYPES}
        for (t, _), v in disc.items():
            counts[t] += int(v.sum())
        return counts

    def report_lines(self) -> list[str]:
        """One tab-separated line per head: head id, log_alpha, P(g=0), gate."""
        disc = self.discretize()
        lines = ["attention_type\tlayer\thead\tlog_alpha\tp_zero\tgate"]
        for t, l in self.keys():
            la = self.log_alpha[(t, l)].data
            p0 = prob_zero(la, **self._consts())
            for h in range(self.num_heads):
                lines.append(f"{t}\t{l}\t{h}\t{la[h]:.6f}\t{p0[h]:.6f}\t{int(disc[(t, l)][h])}")
        return lines

    def state(self) -> dict[str, np.ndarray]:
        return {f"gate/{t}/{l}": self.log_alpha[(t, l)].data.copy() for t, l in self.keys()}

    def copy(self) -> "GateSet":
        gs = GateSet(self.num_layers, self.num_heads, self.gated_types, self.beta, self.gamma, self.zeta)
        for k in self.keys():
            gs.log_alpha[k].data[...] = self.log_alpha[k].data
        return gs
