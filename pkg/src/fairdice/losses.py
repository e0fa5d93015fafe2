"""Scalar pieces of the FairDICE objective.

Everything here is a pure numpy function of its arguments.  Gradients are
returned alongside values where a trainer needs them; the critic gradients
use the envelope identities d/de [w* e - beta f(w*)] = w* and
d/dmu [u(k*) - mu k*] = -k*, which hold because w* and k* are maximizers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

GP_THRESHOLD = 5.0


class UtilityKind(str, enum.Enum):
    ALPHA_FAIR = "alpha-fair"
    PIECEWISE_LOG = "piecewise-log"


class RegularizerSign(str, enum.Enum):
    CORRECT = "correct"
    FLIPPED = "flipped"


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_gp: float = 0.0
    gamma: float = 0.99
    utility_kind: UtilityKind = UtilityKind.ALPHA_FAIR
    regularizer_sign: RegularizerSign = RegularizerSign.CORRECT

    def __post_init__(self):
        object.__setattr__(self, "utility_kind", UtilityKind(self.utility_kind))
        object.__setattr__(self, "regularizer_sign", RegularizerSign(self.regularizer_sign))
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.lambda_gp < 0:
            raise ValueError(f"lambda_gp must be >= 0, got {self.lambda_gp}")

    @property
    def learns_mu(self) -> bool:
        """Utilitarian welfare (alpha=0 alpha-fairness) has u' = 1, so mu is pinned to 1."""
        return not (self.utility_kind is UtilityKind.ALPHA_FAIR and self.alpha == 0)

    @property
    def sign(self) -> float:
        return 1.0 if self.regularizer_sign is RegularizerSign.CORRECT else -1.0

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "lambda_gp": self.lambda_gp,
            "gamma": self.gamma,
            "utility_kind": self.utility_kind.value,
            "regularizer_sign": self.regularizer_sign.value,
        }


class PreferenceVector(NamedTuple):
    xi: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.xi)

    @classmethod
    def ones(cls, k: int) -> "PreferenceVector":
        return cls(np.zeros(k))


@dataclass
class TdBatch:
    nu_s: np.ndarray
    nu_next: np.ndarray
    rewards: np.ndarray  # (B, K)
    nu_init: np.ndarray
    terminal: np.ndarray

    def __post_init__(self):
        self.nu_s = np.asarray(self.nu_s, dtype=float)
        self.nu_next = np.asarray(self.nu_next, dtype=float)
        self.rewards = np.atleast_2d(np.asarray(self.rewards, dtype=float))
        self.nu_init = np.asarray(self.nu_init, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        n = len(self.nu_s)
        for name in ("nu_next", "rewards", "nu_init", "terminal"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"TdBatch.{name} has length {len(getattr(self, name))}, expected {n}")
        if n == 0:
            raise ValueError("TdBatch must be nonempty")


# ---------------------------------------------------------------------------
# Soft chi-square divergence
# ---------------------------------------------------------------------------


def soft_chi2_f(w):
    """f(w) = w log w - w + 1 below 1 and (w - 1)^2 / 2 above."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("soft_chi2_f is defined for w >= 0 only")
    with np.errstate(divide="ignore", invalid="ignore"):
        low = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0) - w + 1.0
    out = np.where(w < 1.0, low, 0.5 * (w - 1.0) ** 2)
    return out[()] if out.ndim == 0 else out


def soft_chi2_f_prime(w):
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(w < 1.0, np.log(np.where(w < 1.0, w, 1.0)), w - 1.0)
    return out[()] if out.ndim == 0 else out


def f_prime_inverse(y):
    y = np.asarray(y, dtype=float)
    out = np.where(y < 0.0, np.exp(np.minimum(y, 0.0)), y + 1.0)
    return out[()] if out.ndim == 0 else out


def soft_chi2_conjugate(y):
    """max_{w>=0} w y - f(w); smooth (C^2) with derivative f_prime_inverse(y)."""
    y = np.asarray(y, dtype=float)
    out = np.where(y < 0.0, np.expm1(np.minimum(y, 0.0)), 0.5 * y * y + y)
    return out[()] if out.ndim == 0 else out


def w_star(e, beta: float):
    if not beta > 0:
        raise ValueError("beta must be positive")
    return np.maximum(0.0, f_prime_inverse(np.asarray(e, dtype=float) / beta))


# ---------------------------------------------------------------------------
# Utilities and the closed-form k*
# ---------------------------------------------------------------------------


def utility(x, hp: HyperParams):
    x = np.asarray(x, dtype=float)
    if hp.utility_kind is UtilityKind.PIECEWISE_LOG:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(x >= 1.0, np.log(np.where(x >= 1.0, x, 1.0)), -0.5 * (x - 2.0) ** 2 + 0.5)
    else:
        if np.any(x <= 0) and hp.alpha > 0:
            raise ValueError("alpha-fair utility needs x > 0")
        if hp.alpha == 1.0:
            out = np.log(x)
        else:
            out = x ** (1.0 - hp.alpha) / (1.0 - hp.alpha)
    return out[()] if out.ndim == 0 else out


def utility_prime(x, hp: HyperParams):
    x = np.asarray(x, dtype=float)
    if hp.utility_kind is UtilityKind.PIECEWISE_LOG:
        with np.errstate(divide="ignore"):
            out = np.where(x >= 1.0, 1.0 / np.where(x >= 1.0, x, 1.0), 2.0 - x)
    else:
        out = x ** (-hp.alpha)
    return out[()] if out.ndim == 0 else out


def k_star(mu, hp: HyperParams):
    """Inverse of u' evaluated at mu."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("k_star requires mu > 0")
    if hp.utility_kind is UtilityKind.PIECEWISE_LOG:
        out = np.where(mu <= 1.0, 1.0 / mu, 2.0 - mu)
    elif hp.alpha == 0:
        raise ValueError("k_star is undefined for alpha = 0 (u' is constant); mu is fixed at 1")
    elif hp.alpha == 1.0:
        out = 1.0 / mu
    else:
        out = mu ** (-1.0 / hp.alpha)
    return out[()] if out.ndim == 0 else out


def mu_regularizer(mu, hp: HyperParams) -> tuple[float, np.ndarray]:
    """sign * sum_i (u(k*_i) - mu_i k*_i) and its gradient in mu."""
    mu = np.asarray(mu, dtype=float)
    if not hp.learns_mu:
        return 0.0, np.zeros_like(mu)
    k = k_star(mu, hp)
    val = utility(k, hp) - mu * k
    if not np.all(np.isfinite(val)):
        raise FloatingPointError("non-finite mu regularizer (k* left the utility's domain)")
    return float(hp.sign * np.sum(val)), -hp.sign * k


# ---------------------------------------------------------------------------
# Critic objective
# ---------------------------------------------------------------------------


def td_error(mu, r, nu_s, nu_s_next, gamma: float, terminal):
    mu = np.asarray(mu, dtype=float)
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != mu.shape[-1]:
        raise ValueError(f"reward dim {r.shape[-1]} does not match mu dim {mu.shape[-1]}")
    boot = np.where(np.asarray(terminal, dtype=bool), 0.0, np.asarray(nu_s_next, dtype=float))
    out = r @ mu + gamma * boot - np.asarray(nu_s, dtype=float)
    return out[()] if np.ndim(out) == 0 else out


class CriticLoss(NamedTuple):
    value: float
    d_nu_s: np.ndarray
    d_nu_next: np.ndarray
    d_nu_init: np.ndarray
    d_xi: np.ndarray
    w: np.ndarray
    e: np.ndarray


def critic_mu_loss_and_grads(batch: TdBatch, mu_params: PreferenceVector, hp: HyperParams) -> CriticLoss:
    """Batch-mean critic/preference loss with gradients w.r.t. every input.

    Gradients for nu are per-sample (already divided by the batch size); the
    caller scatters or backpropagates them into the critic parameters.
    """
    mu = mu_params.mu if hp.learns_mu else np.ones_like(mu_params.xi)
    n = len(batch.nu_s)
    e = td_error(mu, batch.rewards, batch.nu_s, batch.nu_next, hp.gamma, batch.terminal)
    w = w_star(e, hp.beta)
    middle = w * e - hp.beta * soft_chi2_f(w)
    reg, d_mu = mu_regularizer(mu, hp)
    value = float((1.0 - hp.gamma) * batch.nu_init.mean() + middle.mean() + reg)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite critic loss")

    live = ~batch.terminal
    d_nu_s = -w / n
    d_nu_next = np.where(live, hp.gamma * w, 0.0) / n
    d_nu_init = np.full(n, (1.0 - hp.gamma) / n)
    if hp.learns_mu:
        d_mu = d_mu + (w @ batch.rewards) / n
        d_xi = d_mu * mu
    else:
        d_xi = np.zeros_like(mu)
    return CriticLoss(value, d_nu_s, d_nu_next, d_nu_init, d_xi, w, e)


def critic_mu_loss(batch: TdBatch, mu_params: PreferenceVector, hp: HyperParams) -> float:
    return critic_mu_loss_and_grads(batch, mu_params, hp).value


# ---------------------------------------------------------------------------
# Policy losses
# ---------------------------------------------------------------------------


def normalize_weights(w) -> tuple[np.ndarray, bool]:
    """Rescale to batch mean 1.  Returns (weights, degenerate); an all-zero
    batch falls back to uniform weights with degenerate=True."""
    w = np.asarray(w, dtype=float)
    m = w.mean()
    if not m > 0:
        return np.ones_like(w), True
    return w / m, False


def _check_lengths(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ValueError("log_probs, weights and mask must have equal lengths")


def policy_loss_weighted(log_probs, w, terminal_mask=None) -> float:
    return policy_loss_weighted_and_grad(log_probs, w, terminal_mask)[0]


def policy_loss_weighted_and_grad(log_probs, w, terminal_mask=None):
    """-mean(mask * w~ * log pi) with w~ the mean-1 weights (normalized before masking).

    Returns (loss, d loss / d log_probs, degenerate flag)."""
    lp = np.asarray(log_probs, dtype=float)
    mask = np.ones_like(lp) if terminal_mask is None else np.asarray(terminal_mask, dtype=float)
    _check_lengths(lp, np.asarray(w), mask)
    wn, degenerate = normalize_weights(w)
    coef = mask * wn / len(lp)
    return float(-(coef * lp).sum()), -coef, degenerate


def outer_product_sum(log_probs, w, terminal_mask=None) -> float:
    """Sum over the (B, B) broadcast of (mask * w~)[:, None] * log_probs[None, :]."""
    lp = np.asarray(log_probs, dtype=float)
    mask = np.ones_like(lp) if terminal_mask is None else np.asarray(terminal_mask, dtype=float)
    wn, _ = normalize_weights(w)
    return float(((mask * wn)[:, None] * lp[None, :]).sum())


def policy_loss_buggy_outer(log_probs, w, terminal_mask=None) -> float:
    return policy_loss_buggy_outer_and_grad(log_probs, w, terminal_mask)[0]


def policy_loss_buggy_outer_and_grad(log_probs, w, terminal_mask=None):
    """The broadcasting mistake: weights of shape (B, 1) times log-probs of
    shape (B,) give a (B, B) matrix whose mean-over-rows sum is taken.

    Equals -(sum_i mask_i w~_i) * sum_j log_probs_j / B, so every action gets
    the same weight and the gradient is a positive multiple of plain BC's.
    """
    lp = np.asarray(log_probs, dtype=float)
    mask = np.ones_like(lp) if terminal_mask is None else np.asarray(terminal_mask, dtype=float)
    _check_lengths(lp, np.asarray(w), mask)
    wn, degenerate = normalize_weights(w)
    n = len(lp)
    scale = float((mask * wn).sum())
    return -scale * float(lp.sum()) / n, np.full(n, -scale / n), degenerate


def bc_loss_and_grad(log_probs):
    """Unweighted behaviour cloning: -mean log pi."""
    lp = np.asarray(log_probs, dtype=float)
    n = len(lp)
    return float(-lp.mean()), np.full(n, -1.0 / n)


# ---------------------------------------------------------------------------
# Gradient penalty
# ---------------------------------------------------------------------------


def gradient_penalty(norms, hp: HyperParams) -> float:
    return gradient_penalty_and_grad(norms, hp)[0]


def gradient_penalty_and_grad(norms, hp: HyperParams):
    """lambda * sum_i max(0, |grad_i| - 5)^2 and its derivative in each norm."""
    norms = np.asarray(norms, dtype=float)
    if np.any(norms < 0):
        raise ValueError("gradient norms must be nonnegative")
    excess = np.maximum(0.0, norms - GP_THRESHOLD)
    return float(hp.lambda_gp * np.sum(excess**2)), 2.0 * hp.lambda_gp * excess


def interpolate_states(initial_states, next_states, eps: float):
    """s_bar = eps * s_init + (1 - eps) * s_next with one eps shared by the batch."""
    return eps * np.asarray(initial_states, dtype=float) + (1.0 - eps) * np.asarray(next_states, dtype=float)
