"""Parameter schedules and elliptical exploration bonuses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import SingularMatrix

BONUS_CAP = 2.0


def schedule_params(k: int, H: int, A: int, d: int, class_size: int, delta: float,
                    c_alpha: float = 1.0, c_lambda: float = 1.0) -> tuple[float, float]:
    """(alpha_k, lambda_k) with L = log(|F| H k / delta):

    alpha_k = c_alpha * sqrt(H^2 (A + d^2) L),  lambda_k = c_lambda * d * L.
    """
    if k < 1 or not 0 < delta < 1:
        raise ValueError("need k >= 1 and delta in (0, 1)")
    L = math.log(class_size * H * k / delta)
    return c_alpha * math.sqrt(H * H * (A + d * d) * L), c_lambda * d * L


def update_covariance(pairs, phi_hat_h: np.ndarray, lambda_k: float) -> np.ndarray:
    """sum over (s, a) in pairs of phi phi^T, plus lambda_k * I."""
    d = phi_hat_h.shape[-1]
    sigma = lambda_k * np.eye(d)
    if len(pairs):
        s, a = np.asarray(pairs, dtype=int).T
        feats = phi_hat_h[s, a]
        sigma += feats.T @ feats
    return sigma


def covariance_from_counts(counts: np.ndarray, phi_hat_h: np.ndarray, lambda_k: float) -> np.ndarray:
    """Same matrix as update_covariance, from visit counts n[s, a]."""
    d = phi_hat_h.shape[-1]
    feats = phi_hat_h.reshape(-1, d)
    return lambda_k * np.eye(d) + feats.T @ (counts.reshape(-1, 1) * feats)


def _cholesky(sigma: np.ndarray):
    try:
        return cho_factor(sigma, lower=True)
    except LinAlgError as exc:
        raise SingularMatrix("covariance is not positive definite") from exc


def quad_form(phi: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """phi^T sigma^{-1} phi along the last axis, via a Cholesky solve."""
    cf = _cholesky(sigma)
    flat = phi.reshape(-1, phi.shape[-1])
    sol = cho_solve(cf, flat.T)
    return np.einsum("nd,dn->n", flat, sol).reshape(phi.shape[:-1])


def bonus(phi: np.ndarray, sigma_hat: np.ndarray, alpha_k: float, h: int, H: int) -> float:
    """min(alpha * ||phi||_{sigma^-1}, 2) on steps h <= H-3; zero on the last two steps."""
    if h >= H - 2:
        return 0.0
    if alpha_k == 0:
        return 0.0
    q = float(quad_form(np.asarray(phi, dtype=float), sigma_hat))
    return min(alpha_k * math.sqrt(max(q, 0.0)), BONUS_CAP)


@dataclass(frozen=True, eq=False)
class BonusState:
    sigma_hat: np.ndarray  # (H, d, d)
    alpha_k: float
    lambda_k: float
    k: int

    def table(self, phi_hat: np.ndarray) -> np.ndarray:
        """Bonus values b[h, s, a] for features phi_hat (H, S, A, d)."""
        H = phi_hat.shape[0]
        out = np.zeros(phi_hat.shape[:3])
        if self.alpha_k == 0:
            return out
        for h in range(max(H - 2, 0)):
            q = quad_form(phi_hat[h], self.sigma_hat[h])
            out[h] = np.minimum(self.alpha_k * np.sqrt(np.maximum(q, 0.0)), BONUS_CAP)
        return out


def build_bonus_state(visit_counts, phi_hat: np.ndarray, k: int, alpha_k: float,
                      lambda_k: float) -> BonusState:
    """Per-step covariance rebuilt from scratch from the D-bag visit counts.

    ``visit_counts[h]`` is n[s, a] for steps 0..H-2; the final step (which
    carries no data and no bonus) gets lambda_k * I.
    """
    H, _, _, d = phi_hat.shape
    sigma = np.empty((H, d, d))
    for h in range(H):
        if h < len(visit_counts):
            sigma[h] = covariance_from_counts(visit_counts[h], phi_hat[h], lambda_k)
        else:
            sigma[h] = lambda_k * np.eye(d)
    return BonusState(sigma, alpha_k, lambda_k, k)
