"""Mini-batch estimators of entropy, mutual information and KL divergence.

All quantities are in nats. Functions accept numpy arrays, nested lists or
torch tensors; non-tensor inputs are promoted to float64 tensors. Tensor
inputs keep their dtype and autograd graph so the same functions serve as
training losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch

EPS = 1e-12
DEFAULT_LAMBDA = 4.0
ROW_SUM_TOL = 1e-6


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_distribution(p: torch.Tensor, atol: float = ROW_SUM_TOL) -> None:
    with torch.no_grad():
        if not torch.isfinite(p).all():
            raise ValueError("probabilities must be finite")
        if (p < -atol).any() or (p > 1 + atol).any():
            raise ValueError("probabilities must lie in [0, 1]")
        sums = p.sum(dim=-1)
        if not torch.allclose(sums, torch.ones_like(sums), rtol=0.0, atol=atol):
            raise ValueError(
                f"probabilities must sum to 1 (max deviation {float((sums - 1).abs().max()):.3g})"
            )


def check_prob_batch(batch, validate: bool = True) -> torch.Tensor:
    """Return ``batch`` as a B x K tensor, checking the row-stochastic invariant."""
    batch = as_tensor(batch)
    if batch.ndim != 2:
        raise ValueError(f"expected a 2-D batch of distributions, got shape {tuple(batch.shape)}")
    if batch.shape[0] < 1:
        raise ValueError("empty batch")
    if batch.shape[1] < 2:
        raise ValueError("need at least 2 clusters")
    if validate:
        _check_distribution(batch)
    return batch


def _xlogy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # p * log(q) with q floored and 0 * log(.) := 0 exactly
    return torch.where(p > 0, p * torch.log(q.clamp_min(EPS)), torch.zeros_like(p))


def entropy(p) -> torch.Tensor:
    """Shannon entropy of one distribution (or of each row of a 2-D input)."""
    p = as_tensor(p)
    if p.ndim not in (1, 2) or p.shape[-1] < 1:
        raise ValueError(f"expected a probability vector, got shape {tuple(p.shape)}")
    _check_distribution(p)
    return -_xlogy(p, p).sum(dim=-1)


def conditional_entropy(batch, validate: bool = True) -> torch.Tensor:
    """H(Y|X) estimated as the mean per-sample entropy."""
    batch = check_prob_batch(batch, validate)
    return (-_xlogy(batch, batch).sum(dim=1)).mean()


def marginal(batch, validate: bool = True) -> torch.Tensor:
    """p(Y) estimated by averaging the posteriors of a mini-batch."""
    batch = check_prob_batch(batch, validate)
    return batch.mean(dim=0)


@dataclass
class LossValue:
    """A scalar loss with its named components.

    ``scalar == sum(weights[k] * terms[k])``; ``scalar`` keeps the autograd
    graph while ``terms`` hold detached copies for logging.
    """

    scalar: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return float(torch.as_tensor(self.scalar).detach())

    def check(self, atol: float = 1e-9) -> bool:
        total = sum(self.weights[k] * self.terms[k] for k in self.terms)
        return abs(total - float(self)) <= atol * max(1.0, abs(total))


def mi_xy(batch, lam: float = DEFAULT_LAMBDA, validate: bool = True) -> LossValue:
    """lam * H(Y) - H(Y|X); equals MI(X, Y) for ``lam == 1``. To be maximized."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    batch = check_prob_batch(batch, validate)
    p_y = batch.mean(dim=0)
    h_y = -_xlogy(p_y, p_y).sum()
    h_y_given_x = (-_xlogy(batch, batch).sum(dim=1)).mean()
    scalar = lam * h_y - h_y_given_x
    return LossValue(
        scalar,
        terms={"h_y": float(h_y.detach()), "h_y_given_x": float(h_y_given_x.detach())},
        weights={"h_y": float(lam), "h_y_given_x": -1.0},
    )


@dataclass
class JointMatrix:
    """Empirical joint distribution of two cluster assignments."""

    entries: torch.Tensor

    @property
    def marginal_row(self) -> torch.Tensor:
        return self.entries.sum(dim=1)

    @property
    def marginal_col(self) -> torch.Tensor:
        return self.entries.sum(dim=0)

    @property
    def k(self) -> int:
        return self.entries.shape[0]


def joint(batch, batch_t, symmetrize: bool = True, validate: bool = True) -> JointMatrix:
    """Estimate p(Y, Y~) = E_x[p(Y|x) p(Y|T(x))^T] over paired rows."""
    batch = check_prob_batch(batch, validate)
    batch_t = check_prob_batch(batch_t, validate)
    if batch.shape != batch_t.shape:
        raise ValueError(f"shape mismatch: {tuple(batch.shape)} vs {tuple(batch_t.shape)}")
    p = batch.T @ batch_t / batch.shape[0]
    if symmetrize:
        p = (p + p.T) / 2
    # renormalize away float drift from the row sums
    p = p / p.sum()
    return JointMatrix(p)


def mi_yy(j: JointMatrix | torch.Tensor) -> torch.Tensor:
    """Mutual information of a joint matrix: KL(P, P_row P_col^T)."""
    p = j.entries if isinstance(j, JointMatrix) else as_tensor(j)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("joint matrix must be square")
    pi = p.sum(dim=1, keepdim=True)
    pj = p.sum(dim=0, keepdim=True)
    ratio_log = torch.log(p.clamp_min(EPS)) - torch.log(pi.clamp_min(EPS)) - torch.log(pj.clamp_min(EPS))
    return torch.where(p > 0, p * ratio_log, torch.zeros_like(p)).sum()


def kl_div(p, q, validate: bool = True) -> torch.Tensor:
    """KL(p || q) for vectors, or the mean row-wise KL for 2-D batches."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    if p.ndim not in (1, 2):
        raise ValueError("expected vectors or 2-D batches")
    if validate:
        _check_distribution(p)
        _check_distribution(q)
    d = (_xlogy(p, p) - _xlogy(p, q)).sum(dim=-1)
    # Flooring tiny q entries can push a near-zero row to about -1e-13. Clamp the
    # value only: VAT's power iteration needs the gradient in exactly that regime.
    d = d + (d.clamp_min(0.0) - d).detach()
    return d if p.ndim == 1 else d.mean()


MAXIMIZED = ("mi_xy", "mi_yy")
MINIMIZED = ("kl_reg",)


def term_kind(key: str) -> str:
    return key.split(":", 1)[0]


def compose_loss(config, parts: Mapping[str, torch.Tensor]) -> LossValue:
    """Weighted loss for one head from precomputed term values.

    ``config`` is an ExperimentConfig (anything with ``.terms`` whose items
    have ``key`` and ``weight``). Mutual-information terms enter negated so
    that minimizing the result maximizes them; KL terms enter as is.
    """
    wanted = {t.key: t.weight for t in config.terms}
    missing = set(wanted) - set(parts)
    if missing:
        raise KeyError(f"missing loss terms: {sorted(missing)}")
    unknown = set(parts) - set(wanted)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")

    weights: dict[str, float] = {}
    for key, w in wanted.items():
        kind = term_kind(key)
        if kind in MAXIMIZED:
            weights[key] = -float(w)
        elif kind in MINIMIZED:
            weights[key] = float(w)
        else:
            raise KeyError(f"unknown loss term {key!r}")

    scalar = sum(weights[k] * as_tensor(parts[k]) for k in wanted)
    terms = {k: float(torch.as_tensor(parts[k]).detach()) for k in wanted}
    return LossValue(scalar, terms=terms, weights=weights)
