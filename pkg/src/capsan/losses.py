"""Objectives for the adversarial game.

Three building blocks: a margin loss on capsule lengths (real samples pull
their class capsule long and others short; generated samples pull the fake
capsule long), a pull-away term that pushes real-batch features apart, and
first-order feature matching between real and generated batches. Margin and
feature terms are averaged over the batch so magnitudes do not scale with
batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor, make_op
from .errors import BatchTooSmall, LengthOutOfRange, ShapeMismatch

LENGTH_TOL = 1e-9


@dataclass(frozen=True)
class MarginParams:
    """Margins for capsule-length classification.

    alpha down-weights the off-class term; the generator objective drops
    it (alpha = 0).
    """

    alpha: float = 0.5
    s_plus_margin: float = 0.9
    s_minus_margin: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.s_minus_margin < self.s_plus_margin <= 1.0:
            raise ValueError(
                f"margins must satisfy 0 <= {self.s_minus_margin} < "
                f"{self.s_plus_margin} <= 1"
            )
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    def without_alpha(self) -> "MarginParams":
        return MarginParams(0.0, self.s_plus_margin, self.s_minus_margin)


@dataclass(frozen=True)
class TargetVector:
    """One-hot target over the c+1 capsules; slot c marks generated data."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        object.__setattr__(self, "t", t)
        if t.ndim != 1 or not (np.isin(t, (0.0, 1.0)).all() and t.sum() == 1.0):
            raise ValueError("target must be a one-hot vector")

    @classmethod
    def for_class(cls, index: int, num_slots: int) -> "TargetVector":
        t = np.zeros(num_slots)
        t[index] = 1.0
        return cls(t)

    @classmethod
    def fake(cls, num_classes: int) -> "TargetVector":
        return cls.for_class(num_classes, num_classes + 1)


def one_hot(indices, num_slots: int) -> np.ndarray:
    """[batch x num_slots] one-hot rows from integer class ids."""
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if np.any(idx < 0) or np.any(idx >= num_slots):
        raise ValueError(f"class ids must lie in [0, {num_slots}), got {idx}")
    out = np.zeros((idx.size, num_slots))
    out[np.arange(idx.size), idx] = 1.0
    return out


def _target_array(target, shape: tuple[int, ...]) -> np.ndarray:
    if isinstance(target, TargetVector):
        t = target.t
    else:
        t = np.asarray(target, dtype=np.float64)
    t = np.broadcast_to(t, shape)
    if not np.allclose(t.sum(axis=-1), 1.0):
        raise ValueError("each target row must be one-hot")
    return t


def margin_loss(lengths, target, params: MarginParams = MarginParams()) -> Tensor:
    """Sum over capsules of t*relu(m+ - l)^2 + alpha*(1-t)*relu(l - m-)^2,
    averaged over the batch when ``lengths`` has one.

    ``lengths`` is [c+1] or [batch x c+1]; ``target`` a TargetVector, a
    one-hot array of matching shape, or a single one-hot row to broadcast.
    """
    lengths = as_tensor(lengths)
    data = lengths.data
    if np.any(data < -LENGTH_TOL) or np.any(data > 1.0 + LENGTH_TOL):
        raise LengthOutOfRange(
            f"capsule lengths must lie in [0, 1], got range "
            f"[{data.min():.6g}, {data.max():.6g}]"
        )
    t = _target_array(target, lengths.shape)
    miss_pos = dc.relu(params.s_plus_margin - lengths)
    miss_neg = dc.relu(lengths - params.s_minus_margin)
    per_capsule = t * (miss_pos * miss_pos) + (params.alpha * (1.0 - t)) * (
        miss_neg * miss_neg
    )
    per_sample = dc.sum(per_capsule, axis=-1)
    return dc.mean(per_sample) if per_sample.ndim > 0 else per_sample


def pull_away(features) -> Tensor:
    """Mean squared cosine similarity over ordered pairs of distinct rows:
    (1/(m(m-1))) sum_{i != j} cos^2(x_i, x_j). Lives in [0, 1]."""
    features = as_tensor(features)
    if features.ndim != 2:
        raise ShapeMismatch(f"pull_away expects [batch x dim], got {features.shape}")
    m = features.shape[0]
    if m < 2:
        raise BatchTooSmall(f"pull_away needs at least 2 rows, got {m}")
    # zero rows get norm ~1e-12 instead of erroring
    norms = dc.sqrt(dc.sum(features * features, axis=1, keepdims=True) + 1e-24)
    unit = features * dc.power(norms, -1.0)
    gram = dc.matmul(unit, dc.transpose(unit, (1, 0)))
    off_diag = 1.0 - np.eye(m)
    total = dc.sum(gram * gram * off_diag)
    return total * (1.0 / (m * (m - 1)))


def feature_matching(f_real, f_fake) -> Tensor:
    """Euclidean distance between batch-mean feature vectors."""
    f_real, f_fake = as_tensor(f_real), as_tensor(f_fake)
    if f_real.ndim != 2 or f_fake.ndim != 2 or f_real.shape[1] != f_fake.shape[1]:
        raise ShapeMismatch(
            f"feature batches must share width, got {f_real.shape} vs {f_fake.shape}"
        )
    diff = dc.mean(f_real, axis=0) - dc.mean(f_fake, axis=0)
    return dc.sqrt_guarded(dc.sum(diff * diff))


def discriminator_loss(real_out, fake_out, targets, params: MarginParams = MarginParams()) -> Tensor:
    """Margin loss on real samples with their class targets, margin loss on
    generated samples with the fake target, and pull-away over the real
    batch's features.

    ``real_out``/``fake_out`` carry ``lengths`` [batch x c+1] and
    ``features`` [batch x dim]; ``targets`` are real class ids.
    """
    num_slots = real_out.lengths.shape[-1]
    t_real = one_hot(targets, num_slots)
    if t_real[:, -1].any():
        raise ValueError("real targets may not use the fake slot")
    t_fake = np.zeros(num_slots)
    t_fake[-1] = 1.0
    loss = margin_loss(real_out.lengths, t_real, params)
    loss = loss + margin_loss(fake_out.lengths, t_fake, params)
    return loss + pull_away(real_out.features)


def generator_loss(
    f_real,
    f_fake,
    fake_lengths,
    target_class,
    params: MarginParams = MarginParams(),
    include_margin: bool = True,
) -> Tensor:
    """Feature matching plus (optionally) a class-margin term that pushes
    generated samples toward their intended class capsule, with the
    off-class down-weight removed.

    ``include_margin=False`` recovers the pure feature-matching objective.
    """
    loss = feature_matching(f_real, f_fake)
    if include_margin:
        fake_lengths = as_tensor(fake_lengths)
        t = one_hot(target_class, fake_lengths.shape[-1])
        if t[:, -1].any():
            raise ValueError("generated samples must target a real class slot")
        loss = loss + margin_loss(fake_lengths, t, params.without_alpha())
    return loss
