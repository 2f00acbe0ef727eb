"""Exact t-SNE on penultimate classifier features.

O(N^2) throughout: Gaussian joint affinities with per-row bandwidths found by
bisection against a target perplexity, Student-t low-dimensional affinities,
and gradient descent on KL(P||Q) with momentum and early exaggeration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import DefectClass
from .errors import ConfigError, ConvergenceError, TrainingDivergedError

EPS = 1e-12
PERPLEXITY_TOL = 1e-3
MAX_BISECTION_STEPS = 100


@dataclass
class TsneConfig:
    perplexity: float = 15.0
    output_dim: int = 2
    iterations: int = 500
    early_exaggeration: float = 4.0
    exaggeration_iters: int = 50
    learning_rate: float = 100.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0

    def validate(self, n_points: Optional[int] = None) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.perplexity < 1:
            raise ConfigError("perplexity must be >= 1")
        if n_points is not None and self.perplexity > (n_points - 1) / 3:
            raise ConfigError(
                f"perplexity {self.perplexity} too large for N={n_points}"
                f" (must be <= (N-1)/3)"
            )

    def momentum(self, iteration: int) -> float:
        return (
            self.momentum_start
            if iteration < self.momentum_switch_iter
            else self.momentum_final
        )

    def to_json(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "output_dim": self.output_dim,
            "iterations": self.iterations,
            "early_exaggeration": self.early_exaggeration,
            "exaggeration_iters": self.exaggeration_iters,
            "learning_rate": self.learning_rate,
            "momentum_start": self.momentum_start,
            "momentum_final": self.momentum_final,
            "momentum_switch_iter": self.momentum_switch_iter,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TsneConfig":
        cfg = cls(**{k: obj[k] for k in obj if k in cls.__dataclass_fields__})
        cfg.validate()
        return cfg


@dataclass
class Embedding:
    points: np.ndarray  # (N, 2)
    labels: list[int]
    kl_history: list[float]
    ids: list[str] = field(default_factory=list)


def _row_perplexity(p_row: np.ndarray) -> float:
    """2^H of one conditional distribution (natural-log entropy rebased)."""
    nz = p_row[p_row > 0]
    h = -float(np.sum(nz * np.log2(nz)))
    return float(2.0**h)


def _conditional_row(sq_dists: np.ndarray, beta: float) -> np.ndarray:
    """p_{j|i} for one row given precision beta; self-distance excluded."""
    logits = -sq_dists * beta
    logits -= logits.max()
    p = np.exp(logits)
    total = p.sum()
    if total <= 0:
        return np.full_like(p, 1.0 / len(p))
    return p / total


def _bisect_row(sq_dists: np.ndarray, target: float) -> tuple[np.ndarray, float, bool]:
    """Find beta whose conditional matches the target perplexity.

    Returns (row, beta, converged). Rows whose off-diagonal distances are
    all equal have bandwidth-independent uniform conditionals; their
    perplexity is pinned, so the uniform row is accepted without bisection.
    """
    if np.allclose(sq_dists, sq_dists[0]):
        n = len(sq_dists)
        return np.full(n, 1.0 / n), 1.0, True

    beta, beta_min, beta_max = 1.0, 0.0, np.inf
    row = _conditional_row(sq_dists, beta)
    for _ in range(MAX_BISECTION_STEPS):
        perp = _row_perplexity(row)
        if abs(perp - target) <= PERPLEXITY_TOL:
            return row, beta, True
        if perp > target:  # too flat: sharpen
            beta_min = beta
            beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
        else:
            beta_max = beta
            beta = (beta + beta_min) / 2.0
        row = _conditional_row(sq_dists, beta)
    return row, beta, abs(_row_perplexity(row) - target) <= PERPLEXITY_TOL


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x**2).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_p_with_betas(
    features: np.ndarray, perplexity: float
) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional p_{j|i} matrix plus the fitted per-row precisions.

    Rows sum to 1, diagonal is 0; beta_i = 1 / (2 sigma_i^2).
    """
    n = features.shape[0]
    d = _pairwise_sq_dists(features)
    cond = np.zeros((n, n))
    betas = np.zeros(n)
    failed: list[int] = []
    for i in range(n):
        others = np.delete(d[i], i)
        row, beta, ok = _bisect_row(others, perplexity)
        if not ok:
            failed.append(i)
        cond[i, np.arange(n) != i] = row
        betas[i] = beta
    if failed:
        raise ConvergenceError(
            f"perplexity bisection did not converge for rows {failed}"
        )
    return cond, betas


def conditional_p_matrix(features: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-conditional p_{j|i} matrix (rows sum to 1, zero diagonal)."""
    return conditional_p_with_betas(features, perplexity)[0]


def tsne_p_matrix(
    features: np.ndarray, perplexity: float, jitter_seed: int = 0
) -> np.ndarray:
    """Symmetric joint P: p_ij = (p_{j|i} + p_{i|j}) / (2N).

    Duplicate points can stall the bisection; one jittered retry is allowed
    before giving up.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 3:
        raise ConfigError(f"need at least 3 points, got {n}")
    try:
        cond = conditional_p_matrix(features, perplexity)
    except ConvergenceError:
        d = _pairwise_sq_dists(features)
        off_diag = d[~np.eye(n, dtype=bool)]
        if off_diag.min() > 0:
            raise
        rng = np.random.default_rng(jitter_seed)
        scale = max(float(np.sqrt(off_diag.max())), 1.0) * 1e-7
        jittered = features + rng.normal(0.0, scale, size=features.shape)
        cond = conditional_p_matrix(jittered, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    np.fill_diagonal(p, 0.0)
    return p


def _student_t_affinities(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (Q, W) where W = (1+||y_i-y_j||^2)^-1 and Q = W / sum(W)."""
    d = _pairwise_sq_dists(y)
    w = 1.0 / (1.0 + d)
    np.fill_diagonal(w, 0.0)
    q = w / w.sum()
    return q, w


def kl_and_grad(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P||Q) with eps-guarded logs, and its exact gradient in y.

    grad_i = 4 sum_j (p_ij - q_ij) (1 + ||y_i - y_j||^2)^-1 (y_i - y_j)
    """
    q, w = _student_t_affinities(y)
    mask = p > 0
    kl = float(
        np.sum(p[mask] * (np.log(np.maximum(p[mask], EPS)) - np.log(np.maximum(q[mask], EPS))))
    )
    pq_w = (p - q) * w
    grad = 4.0 * ((np.diag(pq_w.sum(axis=1)) - pq_w) @ y)
    return kl, grad


def tsne_step(
    p: np.ndarray,
    y: np.ndarray,
    config: TsneConfig,
    iteration: int,
    velocity: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float, np.ndarray]:
    """One gradient-descent step; returns (y', kl, velocity').

    Early exaggeration scales P for the first ``exaggeration_iters``
    iterations; the reported KL is of the P actually used this step.
    """
    if not np.all(np.isfinite(y)):
        raise TrainingDivergedError(f"non-finite embedding at iteration {iteration}")
    if velocity is None:
        velocity = np.zeros_like(y)
    p_eff = (
        p * config.early_exaggeration
        if iteration < config.exaggeration_iters
        else p
    )
    kl, grad = kl_and_grad(p_eff, y)
    velocity = config.momentum(iteration) * velocity - config.learning_rate * grad
    return y + velocity, kl, velocity


def tsne_embed(
    features: np.ndarray,
    labels: Sequence[int],
    config: TsneConfig,
    ids: Optional[Sequence[str]] = None,
) -> Embedding:
    """Full embedding run: P matrix, seeded init, iterated steps."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    config.validate(n_points=n)
    p = tsne_p_matrix(features, config.perplexity, jitter_seed=config.seed)
    rng = np.random.default_rng(config.seed)
    y = rng.normal(0.0, 1e-2, size=(n, config.output_dim))
    velocity = np.zeros_like(y)
    kl_history: list[float] = []
    for it in range(config.iterations):
        y, kl, velocity = tsne_step(p, y, config, it, velocity)
        kl_history.append(kl)
    return Embedding(
        points=y,
        labels=[int(l) for l in labels],
        kl_history=kl_history,
        ids=list(ids) if ids is not None else [str(i) for i in range(n)],
    )


def nearest_neighbor_purity(embedding: Embedding, target_class: int) -> float:
    """Fraction of target-class points whose nearest neighbor shares the class."""
    y = embedding.points
    labels = np.asarray(embedding.labels)
    idx = np.flatnonzero(labels == target_class)
    if idx.size == 0:
        return 0.0
    d = _pairwise_sq_dists(y)
    np.fill_diagonal(d, np.inf)
    nn = d[idx].argmin(axis=1)
    return float((labels[nn] == target_class).mean())


def save_embedding_csv(embedding: Embedding, path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y", "label"])
        for i, rec_id in enumerate(embedding.ids):
            w.writerow(
                [
                    rec_id,
                    f"{embedding.points[i, 0]:.8f}",
                    f"{embedding.points[i, 1]:.8f}",
                    embedding.labels[i],
                ]
            )


def save_scatter_png(embedding: Embedding, path: Path | str, title: str = "") -> None:
    """Class-colored scatter with the 0-3 class-code legend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    labels = np.asarray(embedding.labels)
    colors = ["tab:blue", "tab:orange", "tab:green", "tab:red"]
    for cls in DefectClass:
        sel = labels == cls.value
        if sel.any():
            ax.scatter(
                embedding.points[sel, 0],
                embedding.points[sel, 1],
                s=14,
                c=colors[cls.value],
                label=f"{cls.value}: {cls.label}",
            )
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
