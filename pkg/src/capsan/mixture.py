"""Class-conditional latent sampling and the oversampling budget.

Per-class Gaussians are fitted to linear projections of discriminator
features; generation draws latents from a mixture that picks a minority
class with probability pi and otherwise follows the real class
distribution. The budget n+ = floor(dist+ * (s- - s+) * phi) decides how
many minority samples to synthesize, phi = 1 meaning "fully rebalance".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClassTooSmall, EmptyMinoritySet

VAR_FLOOR = 1e-6


@dataclass
class ClassGaussian:
    """Diagonal Gaussian over latent space for one class."""

    class_id: int
    mu: np.ndarray
    sigma_diag: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma_diag = np.asarray(self.sigma_diag, dtype=np.float64)
        if self.mu.shape != self.sigma_diag.shape or self.mu.ndim != 1:
            raise ValueError(
                f"mu/sigma_diag must be equal-length vectors, got "
                f"{self.mu.shape} vs {self.sigma_diag.shape}"
            )
        if (self.sigma_diag < 0).any():
            raise ValueError("sigma_diag entries must be nonnegative")


@dataclass
class MixtureConfig:
    pi: float = 0.5
    minority_class_ids: frozenset = frozenset()

    def __post_init__(self):
        self.minority_class_ids = frozenset(self.minority_class_ids)
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"pi must lie in [0, 1], got {self.pi}")


@dataclass
class DatasetStats:
    """Per-class sample counts plus the minority/majority pair (s+, s-)."""

    class_counts: dict[int, int]
    s_plus: int
    s_minus: int

    def __post_init__(self):
        if not 0 <= self.s_plus <= self.s_minus:
            raise ValueError(
                f"need s_minus >= s_plus >= 0, got s+={self.s_plus} s-={self.s_minus}"
            )

    @classmethod
    def from_labels(cls, labels, minority_class: int) -> "DatasetStats":
        labels = np.asarray(labels)
        ids, counts = np.unique(labels, return_counts=True)
        table = {int(i): int(n) for i, n in zip(ids, counts)}
        others = [n for i, n in table.items() if i != minority_class]
        return cls(
            class_counts=table,
            s_plus=table.get(minority_class, 0),
            s_minus=max(others) if others else table.get(minority_class, 0),
        )


def class_stats(features, labels, projector) -> list[ClassGaussian]:
    """Fit one diagonal Gaussian per class to ``features @ projector``.

    Population variance, floored at 1e-6 so degenerate classes stay
    sampleable. Every class needs at least 2 samples.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    projector = np.asarray(projector, dtype=np.float64)
    latents = features @ projector
    out = []
    for cid in sorted(set(labels.tolist())):
        rows = latents[labels == cid]
        if rows.shape[0] < 2:
            raise ClassTooSmall(
                f"class {cid} has {rows.shape[0]} sample(s); need >= 2 for stats"
            )
        var = rows.var(axis=0)  # population convention (divide by n)
        out.append(
            ClassGaussian(
                class_id=int(cid), mu=rows.mean(axis=0),
                sigma_diag=np.maximum(var, VAR_FLOOR),
            )
        )
    return out


def sample_latent(t_c: ClassGaussian, n: int, rng: np.random.Generator) -> np.ndarray:
    """n independent draws mu + sqrt(sigma_diag) * standard normal."""
    if n < 1:
        raise ValueError(f"need n >= 1 draws, got {n}")
    eps = rng.standard_normal((n, t_c.mu.shape[0]))
    return t_c.mu + np.sqrt(t_c.sigma_diag) * eps


def mixture_sample(
    cfg: MixtureConfig,
    gaussians: list[ClassGaussian] | dict[int, ClassGaussian],
    priors: dict[int, float],
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n latents with intended labels.

    Each draw picks a minority class uniformly with probability pi, and
    otherwise a class proportional to ``priors`` (real class frequencies).
    Returns (latents [n x latent_dim], labels [n]).
    """
    table = (
        {g.class_id: g for g in gaussians} if not isinstance(gaussians, dict) else gaussians
    )
    minority = sorted(cfg.minority_class_ids)
    if cfg.pi > 0 and not minority:
        raise EmptyMinoritySet("pi > 0 but no minority class configured")
    missing = set(priors) - set(table)
    if missing:
        raise KeyError(f"no Gaussian fitted for classes {sorted(missing)}")

    all_ids = sorted(priors)
    weights = np.array([max(float(priors[i]), 0.0) for i in all_ids])
    weights = weights / weights.sum()

    labels = np.empty(n, dtype=np.int64)
    use_minority = rng.random(n) < cfg.pi
    k = int(use_minority.sum())
    if k:
        labels[use_minority] = rng.choice(minority, size=k)
    if n - k:
        labels[~use_minority] = rng.choice(all_ids, size=n - k, p=weights)

    dim = next(iter(table.values())).mu.shape[0]
    latents = np.empty((n, dim))
    # per-class draws in sorted order keep the stream deterministic
    for cid in sorted(set(labels.tolist())):
        mask = labels == cid
        latents[mask] = sample_latent(table[cid], int(mask.sum()), rng)
    return latents, labels


def num_to_generate(stats: DatasetStats, dist_plus: float = 1.0, phi: float = 1.0) -> int:
    """floor(dist+ * (s- - s+) * phi); phi=0.5 fills half the gap."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    if dist_plus <= 0:
        raise ValueError(f"dist_plus must be positive, got {dist_plus}")
    return int(np.floor(dist_plus * (stats.s_minus - stats.s_plus) * phi))
