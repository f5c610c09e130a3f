"""Variance-preserving diffusion schedule and v-parameterization algebra.

The schedule stores per-step signal/noise levels with alpha^2 + sigma^2 = 1.
Conversions between (x0, eps, v, x_t) are exact algebraic identities:

    x_t = alpha * x0 + sigma * eps
    v   = alpha * eps - sigma * x0
    x0  = alpha * x_t - sigma * v
    eps = sigma * x_t + alpha * v
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError


class DiffusionSchedule:
    """Discrete variance-preserving schedule over T steps."""

    def __init__(self, alpha: np.ndarray, sigma: np.ndarray):
        alpha = np.asarray(alpha, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if alpha.shape != sigma.shape or alpha.ndim != 1:
            raise ConfigError("alpha and sigma must be 1-d arrays of equal length")
        if np.max(np.abs(alpha**2 + sigma**2 - 1.0)) > 1e-6:
            raise ConfigError("schedule is not variance preserving")
        if not (np.all(np.diff(alpha) < 0) and np.all(np.diff(sigma) > 0)):
            raise ConfigError("alpha must strictly decrease and sigma increase")
        self.alpha = alpha
        self.sigma = sigma

    @property
    def T(self) -> int:
        return len(self.alpha)

    @classmethod
    def cosine(cls, T: int = 1000, offset: float = 0.008) -> "DiffusionSchedule":
        """Squared-cosine signal schedule, the standard v-prediction pairing."""
        t = np.arange(T, dtype=np.float64)
        alpha_bar = np.cos((t / T + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        alpha_bar = alpha_bar / alpha_bar[0] * (1.0 - 1e-8)
        return cls(np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar))

    def _coeffs(self, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t_idx = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t_idx < 0) or torch.any(t_idx >= self.T):
            raise IndexError(f"t out of range [0, {self.T})")
        alpha = torch.as_tensor(self.alpha, dtype=like.dtype)[t_idx]
        sigma = torch.as_tensor(self.sigma, dtype=like.dtype)[t_idx]
        # Broadcast per-sample coefficients over trailing dims.
        while alpha.dim() < like.dim():
            alpha = alpha.unsqueeze(-1)
            sigma = sigma.unsqueeze(-1)
        return alpha, sigma

    def add_noise(self, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """x_t = alpha[t] * x0 + sigma[t] * eps."""
        if eps.shape != x0.shape:
            raise ConfigError("noise shape must match signal shape")
        alpha, sigma = self._coeffs(t, x0)
        return alpha * x0 + sigma * eps

    def v_target(self, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
        """v = alpha[t] * eps - sigma[t] * x0."""
        alpha, sigma = self._coeffs(t, x0)
        return alpha * eps - sigma * x0

    def x0_from_v(self, x_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
        alpha, sigma = self._coeffs(t, x_t)
        return alpha * x_t - sigma * v

    def eps_from_v(self, x_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
        alpha, sigma = self._coeffs(t, x_t)
        return sigma * x_t + alpha * v

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(np.asarray(d["alpha"]), np.asarray(d["sigma"]))
