"""Loss functions over per-position vocabulary logits, with analytic gradients.

The family covers token-level losses (cross-entropy, focal) and region losses
borrowed from segmentation (soft Dice, self-adjusting Dice, generalized Dice,
Lovász) applied per vocabulary class over a selected set of sequence positions.
A convex combination mixes cross-entropy over instruction and answer positions
with one auxiliary loss restricted to answer positions.

Conventions shared by every loss here:

* arithmetic is float64 end to end;
* probabilities come from a row softmax of the logits and are clamped to
  [1e-12, 1] before any log;
* PAD positions are never selected and contribute exactly zero to values and
  gradients;
* token losses (cross-entropy, focal) reduce with MEAN over selected positions
  by default (SUM selectable); region losses are global scalars by construction
  and take no reduction;
* every public loss returns a ``LossResult`` whose gradient has the same shape
  as the input logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class Role(IntEnum):
    """Position roles inside a training batch."""

    INSTRUCTION = 0
    ANSWER = 1
    PAD = 2


FULL_CONTEXT = (Role.INSTRUCTION, Role.ANSWER)
ANSWER_ONLY = (Role.ANSWER,)


class Reduction(Enum):
    MEAN = "mean"
    SUM = "sum"


class AuxiliaryKind(Enum):
    """Which auxiliary loss the combined objective applies to answer positions."""

    FOCAL = "fl"
    DICE = "dl"
    GENERALIZED_DICE = "gdl"
    SELF_ADJUSTING_DICE = "sadl"
    LOVASZ = "ll"
    NONE = "none"


class EmptyClassPolicy(Enum):
    """Handling of classes with zero ground-truth volume in generalized Dice."""

    ZERO_WEIGHT = "zero_weight"
    EPSILON = "epsilon"


#: EPSILON policy replaces the 1/(sum y)^2 weight of an empty class by 1/eps^2.
EMPTY_CLASS_EPSILON = 1e-6


class LovaszMode(Enum):
    BINARY_HINGE = "binary_hinge"
    MULTICLASS_SOFTMAX = "multiclass_softmax"


class LossInputError(ValueError):
    """Base class for malformed loss inputs."""


class NoSelectedPositions(LossInputError):
    """The role filter selected no positions."""


class EmptyAnswerMask(LossInputError):
    """An auxiliary loss was requested but the batch has no answer positions."""


class AllClassesEmpty(LossInputError):
    """Every class weight in generalized Dice was suppressed."""


class EmptyInput(LossInputError):
    """An operation that needs at least one element received none."""


@dataclass
class LogitBatch:
    """One flat batch of per-position logits with targets and roles.

    ``logits`` is (positions, vocabulary) float64, ``targets`` holds the gold
    token index per position, and ``role_mask`` assigns each position a
    :class:`Role`. At least one position must be non-PAD.
    """

    logits: np.ndarray
    targets: np.ndarray
    role_mask: np.ndarray

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.intp)
        self.role_mask = np.asarray(self.role_mask, dtype=np.intp)
        if self.logits.ndim != 2:
            raise LossInputError("logits must be 2-d (positions, vocabulary)")
        n, vocab = self.logits.shape
        if vocab < 2:
            raise LossInputError("vocabulary size must be at least 2")
        if self.targets.shape != (n,) or self.role_mask.shape != (n,):
            raise LossInputError("targets and role_mask must be 1-d of length len(logits)")
        if np.isnan(self.logits).any() or np.isposinf(self.logits).any():
            raise LossInputError("logits must not contain NaN or +inf")
        if self.targets.min(initial=0) < 0 or self.targets.max(initial=0) >= vocab:
            raise LossInputError("every target index must be in [0, vocabulary)")
        valid_roles = {int(Role.INSTRUCTION), int(Role.ANSWER), int(Role.PAD)}
        if not set(np.unique(self.role_mask).tolist()) <= valid_roles:
            raise LossInputError("role_mask entries must be Role values")
        if not (self.role_mask != Role.PAD).any():
            raise LossInputError("batch must contain at least one non-PAD position")

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def from_probs(
        cls,
        probs: np.ndarray,
        targets: Sequence[int],
        role_mask: Sequence[int] | None = None,
    ) -> "LogitBatch":
        """Build a batch whose softmax reproduces ``probs`` (rows sum to 1)."""
        probs = np.asarray(probs, dtype=np.float64)
        logits = np.log(np.clip(probs, 1e-300, None))
        if role_mask is None:
            role_mask = np.full(len(logits), int(Role.ANSWER))
        return cls(logits, np.asarray(targets), np.asarray(role_mask))


@dataclass
class LossConfig:
    """Configuration for the combined objective.

    ``mix`` is the cross-entropy weight (written as lambda in most loss-mixing
    formulations); the auxiliary loss gets 1 - mix and only ever sees answer
    positions.
    """

    mix: float = 0.6
    gamma: float = 2.0
    auxiliary_kind: AuxiliaryKind = AuxiliaryKind.NONE
    empty_class_policy: EmptyClassPolicy = EmptyClassPolicy.ZERO_WEIGHT
    reduction: Reduction = Reduction.MEAN

    def __post_init__(self) -> None:
        if not 0.0 <= self.mix <= 1.0:
            raise LossInputError(f"mix must lie in [0, 1], got {self.mix}")
        if self.gamma < 0:
            raise LossInputError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class LossResult:
    """Scalar loss value and its gradient with respect to the logits."""

    value: float
    gradient: np.ndarray


LossFn = Callable[[LogitBatch], LossResult]


def _selected(batch: LogitBatch, roles: Iterable[Role]) -> np.ndarray:
    roles = tuple(roles)
    if Role.PAD in roles:
        raise LossInputError("PAD positions are never selectable")
    if not roles:
        raise LossInputError("role filter must name at least one role")
    mask = np.isin(batch.role_mask, [int(r) for r in roles])
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise NoSelectedPositions(f"no positions with roles {tuple(r.name for r in roles)}")
    return idx


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax in float64, stable under large logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = np.sum(dprobs * probs, axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _scatter(batch: LogitBatch, idx: np.ndarray, grad_sel: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(batch.logits)
    grad[idx] = grad_sel
    return grad


def ce_loss(
    batch: LogitBatch,
    roles: Iterable[Role] = FULL_CONTEXT,
    reduction: Reduction = Reduction.MEAN,
) -> LossResult:
    """Cross-entropy -log p_target over the selected positions."""
    idx = _selected(batch, roles)
    probs = softmax(batch.logits[idx])
    rows = np.arange(idx.size)
    targets = batch.targets[idx]
    p_t = probs[rows, targets]
    values = -np.log(np.clip(p_t, PROB_FLOOR, 1.0))
    scale = 1.0 / idx.size if reduction is Reduction.MEAN else 1.0
    grad_sel = probs.copy()
    grad_sel[rows, targets] -= 1.0
    grad_sel *= scale
    return LossResult(float(values.sum() * scale), _scatter(batch, idx, grad_sel))


def focal_loss(
    batch: LogitBatch,
    gamma: float = 2.0,
    roles: Iterable[Role] = FULL_CONTEXT,
    reduction: Reduction = Reduction.MEAN,
) -> LossResult:
    """Focal loss -(1 - p_t)^gamma log p_t over the selected positions.

    gamma = 0 falls through to :func:`ce_loss` so the reduction is exact to
    floating rounding, not merely close.
    """
    if gamma < 0:
        raise LossInputError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0.0:
        return ce_loss(batch, roles, reduction)
    idx = _selected(batch, roles)
    probs = softmax(batch.logits[idx])
    rows = np.arange(idx.size)
    targets = batch.targets[idx]
    p_t = probs[rows, targets]
    p_c = np.clip(p_t, PROB_FLOOR, 1.0)
    log_pt = np.log(p_c)
    miss = 1.0 - p_t
    values = -(miss**gamma) * log_pt
    scale = 1.0 / idx.size if reduction is Reduction.MEAN else 1.0

    # d/dp of -(1-p)^g log p; the g*(1-p)^(g-1)*log p term tends to 0 as p -> 1
    # for every g > 0, so the miss == 0 branch is the exact limit.
    dv_dp = np.zeros_like(p_t)
    hit = miss > 0.0
    dv_dp[hit] = gamma * miss[hit] ** (gamma - 1.0) * log_pt[hit] - (miss[hit] ** gamma) / p_c[hit]

    dprobs = np.zeros_like(probs)
    dprobs[rows, targets] = dv_dp * scale
    grad_sel = _softmax_backward(probs, dprobs)
    return LossResult(float(values.sum() * scale), _scatter(batch, idx, grad_sel))


def soft_dice_term(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Soft Dice loss of one class column: 1 - 2*sum(p*y) / (sum(p^2) + sum(y^2)).

    Returns the scalar term and its gradient with respect to ``p``. A column
    with zero denominator (possible only when y is all zero and p is exactly
    zero) yields term 1 with zero gradient.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    num = 2.0 * float(np.dot(p, y))
    den = float(np.dot(p, p) + np.dot(y, y))
    if den == 0.0:
        return 1.0, np.zeros_like(p)
    value = 1.0 - num / den
    dp = -(2.0 * y * den - 2.0 * p * num) / den**2
    return value, dp


def self_adjusting_dice_term(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Self-adjusting Dice loss of one class column.

    1 - 2*sum((1-p)*p*y) / sum((1-p)*p + y), with the denominator grouping the
    per-position (1-p)*p weight and the label inside one sum. The (1-p) factor
    suppresses easy examples, so a perfectly confident correct prediction
    still carries term 1 (the numerator collapses to zero).
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = (1.0 - p) * p
    num = 2.0 * float(np.dot(w, y))
    den = float(np.sum(w + y))
    if den == 0.0:
        return 1.0, np.zeros_like(p)
    value = 1.0 - num / den
    dnum = 2.0 * (1.0 - 2.0 * p) * y
    dden = 1.0 - 2.0 * p
    dp = -(dnum * den - num * dden) / den**2
    return value, dp


def _present_classes(targets: np.ndarray) -> np.ndarray:
    return np.unique(targets)


def dice_loss(batch: LogitBatch, roles: Iterable[Role] = FULL_CONTEXT) -> LossResult:
    """Soft Dice loss per vocabulary class, averaged over classes present."""
    idx = _selected(batch, roles)
    probs = softmax(batch.logits[idx])
    targets = batch.targets[idx]
    classes = _present_classes(targets)
    y = (targets[:, None] == classes[None, :]).astype(np.float64)
    p = probs[:, classes]
    num = 2.0 * np.sum(p * y, axis=0)
    den = np.sum(p * p, axis=0) + np.sum(y, axis=0)
    terms = 1.0 - num / den
    dprobs_cols = -(2.0 * y * den[None, :] - 2.0 * p * num[None, :]) / den[None, :] ** 2
    dprobs = np.zeros_like(probs)
    dprobs[:, classes] = dprobs_cols / classes.size
    grad_sel = _softmax_backward(probs, dprobs)
    return LossResult(float(terms.mean()), _scatter(batch, idx, grad_sel))


def self_adjusting_dice_loss(
    batch: LogitBatch, roles: Iterable[Role] = FULL_CONTEXT
) -> LossResult:
    """Self-adjusting Dice per vocabulary class, averaged over classes present."""
    idx = _selected(batch, roles)
    probs = softmax(batch.logits[idx])
    targets = batch.targets[idx]
    classes = _present_classes(targets)
    y = (targets[:, None] == classes[None, :]).astype(np.float64)
    p = probs[:, classes]
    w = (1.0 - p) * p
    num = 2.0 * np.sum(w * y, axis=0)
    den = np.sum(w + y, axis=0)
    terms = 1.0 - num / den
    dnum = 2.0 * (1.0 - 2.0 * p) * y
    dden = 1.0 - 2.0 * p
    dprobs_cols = -(dnum * den[None, :] - num[None, :] * dden) / den[None, :] ** 2
    dprobs = np.zeros_like(probs)
    dprobs[:, classes] = dprobs_cols / classes.size
    grad_sel = _softmax_backward(probs, dprobs)
    return LossResult(float(terms.mean()), _scatter(batch, idx, grad_sel))


def generalized_dice_loss(
    batch: LogitBatch,
    roles: Iterable[Role] = FULL_CONTEXT,
    empty_class_policy: EmptyClassPolicy = EmptyClassPolicy.ZERO_WEIGHT,
) -> LossResult:
    """Generalized Dice with per-class weights 1/(sum y)^2.

    Under ZERO_WEIGHT, classes with zero ground-truth volume are dropped from
    both sums; under EPSILON they stay with weight 1/EMPTY_CLASS_EPSILON^2.
    """
    idx = _selected(batch, roles)
    probs = softmax(batch.logits[idx])
    targets = batch.targets[idx]
    if empty_class_policy is EmptyClassPolicy.ZERO_WEIGHT:
        classes = _present_classes(targets)
    else:
        classes = np.arange(batch.vocab_size)
    y = (targets[:, None] == classes[None, :]).astype(np.float64)
    p = probs[:, classes]
    volume = np.sum(y, axis=0)
    weights = np.empty_like(volume)
    nonempty = volume > 0
    weights[nonempty] = 1.0 / volume[nonempty] ** 2
    weights[~nonempty] = 1.0 / EMPTY_CLASS_EPSILON**2
    if not nonempty.any() and empty_class_policy is EmptyClassPolicy.ZERO_WEIGHT:
        raise AllClassesEmpty("every class weight was suppressed")
    num = 2.0 * float(np.sum(weights * np.sum(p * y, axis=0)))
    den = float(np.sum(weights * np.sum(p + y, axis=0)))
    value = 1.0 - num / den
    dprobs_cols = -(2.0 * weights[None, :] * y * den - num * weights[None, :]) / den**2
    dprobs = np.zeros_like(probs)
    dprobs[:, classes] = dprobs_cols
    grad_sel = _softmax_backward(probs, dprobs)
    return LossResult(value, _scatter(batch, idx, grad_sel))


def lovasz_grad_weights(sorted_gt: np.ndarray) -> np.ndarray:
    """Jaccard-extension weights for errors already sorted in descending order.

    With cumulative foreground/background counts through rank k,
    J[k] = 1 - (sum(gt) - cum_fg[k]) / (sum(gt) + cum_bg[k]); the weights are
    the first differences of J. They are nonnegative and sum to the Jaccard
    loss of mispredicting the full support.
    """
    gt = np.asarray(sorted_gt, dtype=np.float64)
    if gt.ndim != 1 or gt.size == 0:
        raise EmptyInput("sorted ground truth must be a nonempty 1-d array")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise LossInputError("ground truth entries must be 0 or 1")
    gts = gt.sum()
    intersection = gts - np.cumsum(gt)
    union = gts + np.cumsum(1.0 - gt)
    jaccard = 1.0 - intersection / union
    weights = jaccard.copy()
    weights[1:] -= jaccard[:-1]
    return weights


def lovasz_hinge(scores: np.ndarray, signs: np.ndarray) -> tuple[float, np.ndarray]:
    """Lovász hinge over margins for labels in {-1, +1}.

    Hinge errors max(0, 1 - score*sign) are sorted descending (stable, ties by
    position) and dotted with the Jaccard-extension weights of the permuted
    foreground indicator. Returns the loss and its gradient wrt ``scores``;
    all margins satisfied gives loss 0. The subgradient at an exact hinge
    kink is taken as 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    signs = np.asarray(signs, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput("scores must be nonempty")
    if not np.isin(signs, (-1.0, 1.0)).all():
        raise LossInputError("signs must be -1 or +1")
    margins = 1.0 - scores * signs
    errors = np.maximum(margins, 0.0)
    perm = np.argsort(-errors, kind="stable")
    fg = (signs > 0).astype(np.float64)
    weights = lovasz_grad_weights(fg[perm])
    value = float(errors[perm] @ weights)
    derr = np.zeros_like(errors)
    derr[perm] = weights
    dscores = np.where(margins > 0.0, -signs * derr, 0.0)
    return value, dscores


def lovasz_loss(
    batch: LogitBatch,
    roles: Iterable[Role] = FULL_CONTEXT,
    mode: LovaszMode = LovaszMode.MULTICLASS_SOFTMAX,
) -> LossResult:
    """Lovász extension of the Jaccard loss.

    MULTICLASS_SOFTMAX forms per-class errors (1 - p_c at positions whose
    target is c, p_c elsewhere), sorts each class column descending with ties
    broken by position index, dots with the Jaccard-extension weights, and
    averages over classes present in the targets. The gradient holds the sort
    permutation fixed.

    BINARY_HINGE requires vocabulary size 2; the per-position score is the
    logit margin logits[:, 1] - logits[:, 0] and targets map to sign -1/+1.
    """
    idx = _selected(batch, roles)
    logits = batch.logits[idx]
    targets = batch.targets[idx]
    if mode is LovaszMode.BINARY_HINGE:
        if batch.vocab_size != 2:
            raise LossInputError("binary hinge mode requires vocabulary size 2")
        scores = logits[:, 1] - logits[:, 0]
        signs = np.where(targets == 1, 1.0, -1.0)
        value, dscores = lovasz_hinge(scores, signs)
        grad_sel = np.zeros_like(logits)
        grad_sel[:, 1] = dscores
        grad_sel[:, 0] = -dscores
        return LossResult(value, _scatter(batch, idx, grad_sel))

    probs = softmax(logits)
    classes = _present_classes(targets)
    dprobs = np.zeros_like(probs)
    total = 0.0
    for col, cls in enumerate(classes):
        fg = (targets == cls).astype(np.float64)
        p_c = probs[:, cls]
        errors = np.where(fg > 0, 1.0 - p_c, p_c)
        perm = np.argsort(-errors, kind="stable")
        weights = lovasz_grad_weights(fg[perm])
        total += float(errors[perm] @ weights)
        derr = np.zeros_like(errors)
        derr[perm] = weights
        dprobs[:, cls] += derr * (1.0 - 2.0 * fg)
    total /= classes.size
    dprobs /= classes.size
    grad_sel = _softmax_backward(probs, dprobs)
    return LossResult(total, _scatter(batch, idx, grad_sel))


def _auxiliary(batch: LogitBatch, config: LossConfig) -> LossResult:
    kind = config.auxiliary_kind
    if kind is AuxiliaryKind.FOCAL:
        return focal_loss(batch, config.gamma, ANSWER_ONLY, config.reduction)
    if kind is AuxiliaryKind.DICE:
        return dice_loss(batch, ANSWER_ONLY)
    if kind is AuxiliaryKind.GENERALIZED_DICE:
        return generalized_dice_loss(batch, ANSWER_ONLY, config.empty_class_policy)
    if kind is AuxiliaryKind.SELF_ADJUSTING_DICE:
        return self_adjusting_dice_loss(batch, ANSWER_ONLY)
    if kind is AuxiliaryKind.LOVASZ:
        return lovasz_loss(batch, ANSWER_ONLY, LovaszMode.MULTICLASS_SOFTMAX)
    raise LossInputError(f"no auxiliary dispatch for {kind}")


def combined_loss(batch: LogitBatch, config: LossConfig) -> LossResult:
    """mix * CE(instruction + answer) + (1 - mix) * auxiliary(answer only).

    Instruction positions receive gradient only through the cross-entropy
    term, so the auxiliary gradient there is exactly zero. When mix == 1 the
    auxiliary branch is skipped entirely, which makes the loss trace
    bit-identical to a NONE run; when mix == 0 the cross-entropy branch is
    skipped symmetrically.
    """
    kind = config.auxiliary_kind
    if kind is not AuxiliaryKind.NONE and not (batch.role_mask == Role.ANSWER).any():
        raise EmptyAnswerMask("auxiliary loss requested but batch has no answer positions")

    value = 0.0
    gradient = np.zeros_like(batch.logits)
    if config.mix > 0.0:
        ce = ce_loss(batch, FULL_CONTEXT, config.reduction)
        value += config.mix * ce.value
        gradient += config.mix * ce.gradient
    if config.mix < 1.0 and kind is not AuxiliaryKind.NONE:
        aux = _auxiliary(batch, config)
        value += (1.0 - config.mix) * aux.value
        gradient += (1.0 - config.mix) * aux.gradient
    return LossResult(value, gradient)


def lovasz_tie_rows(
    batch: LogitBatch,
    roles: Iterable[Role],
    step: float,
    mode: LovaszMode = LovaszMode.MULTICLASS_SOFTMAX,
) -> set[int]:
    """Absolute row indices whose Lovász sort order could flip under a +-step
    perturbation of any single logit in that row.

    Perturbing one logit moves only that row's class errors, each by at most
    the step size, so two errors can cross only if their gap is <= 2*step.
    Binary hinge mode additionally flags rows sitting at the hinge kink.
    """
    idx = _selected(batch, roles)
    logits = batch.logits[idx]
    targets = batch.targets[idx]
    flagged: set[int] = set()
    window = 2.0 * step
    if mode is LovaszMode.BINARY_HINGE:
        scores = logits[:, 1] - logits[:, 0]
        signs = np.where(targets == 1, 1.0, -1.0)
        margins = 1.0 - scores * signs
        errors = np.maximum(margins, 0.0)
        for i in range(idx.size):
            if abs(margins[i]) <= window:
                flagged.add(int(idx[i]))
                continue
            gaps = np.abs(errors - errors[i])
            gaps[i] = np.inf
            if gaps.min() <= window:
                flagged.add(int(idx[i]))
        return flagged

    probs = softmax(logits)
    for cls in _present_classes(targets):
        fg = targets == cls
        errors = np.where(fg, 1.0 - probs[:, cls], probs[:, cls])
        for i in range(idx.size):
            gaps = np.abs(errors - errors[i])
            gaps[i] = np.inf
            if gaps.min() <= window:
                flagged.add(int(idx[i]))
    return flagged
