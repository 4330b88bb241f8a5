"""Baseline, affinity and joint losses.

Batch ordering contract: the first K* rows of any concatenated batch are RGB
samples and the last K* rows are IR samples, identity-grouped within each
block. Labels are 1-based identity ids.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Literal

import torch

from diff_core import (
    DTYPE, ParamStore, check_shape, ensure_finite, finite_diff_check, hinge, kink_distance, l2_normalize,
    pairwise_euclidean, softmax,
)
from errors import ConfigError, LabelError, NumericalError

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-30

# How many true-label probabilities were clamped, keyed by loss name.
clamp_events: Counter = Counter()


@dataclass(frozen=True)
class LossWeights:
    """Weights and margins of L_Final = baseline*L_B + lam*L_D + zeta*L_A.

    ``lam``/``zeta`` default to the optima of a lambda/zeta sweep.
    ``margin`` (m) and ``delta`` are not given by the method; 0.6 and 2.0 are
    our choices. ``baseline`` and ``affinity_loss`` exist for ablations; the
    method itself uses baseline=1 and the margin loss.
    """

    lam: float = 1.1
    zeta: float = 1.5
    triplet_margin: float = 0.3
    margin: float = 0.6
    delta: float = 2.0
    baseline: float = 1.0
    affinity_loss: Literal["margin", "l1"] = "margin"

    def validate(self) -> None:
        values = {
            "lam": self.lam, "zeta": self.zeta, "triplet_margin": self.triplet_margin,
            "margin": self.margin, "baseline": self.baseline,
        }
        for name, value in values.items():
            if not (value >= 0 and value != float("inf")):
                raise ConfigError(f"loss weight {name} must be finite and nonnegative, got {value}")
        if not 0 < self.delta < float("inf"):
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.affinity_loss not in ("margin", "l1"):
            raise ConfigError(f"unknown affinity_loss '{self.affinity_loss}'")


@dataclass
class BatchOutputs:
    """Everything the joint objective needs from one forward pass."""

    global_rgb: torch.Tensor
    global_ir: torch.Tensor
    probs_rgb: torch.Tensor
    probs_ir: torch.Tensor
    fused_probs_rgb: torch.Tensor
    fused_probs_ir: torch.Tensor


@dataclass
class LossBreakdown:
    baseline_rgb: torch.Tensor
    baseline_ir: torch.Tensor
    dff: torch.Tensor
    affinity: torch.Tensor
    final: torch.Tensor

    def values(self) -> dict[str, float]:
        return {
            "loss_b_rgb": self.baseline_rgb.detach().item(),
            "loss_b_ir": self.baseline_ir.detach().item(),
            "loss_d": self.dff.detach().item(),
            "loss_a": self.affinity.detach().item(),
            "loss_final": self.final.detach().item(),
        }


def _check_labels(labels: torch.Tensor, identity_count: int) -> None:
    if labels.numel() and (int(labels.min()) < 1 or int(labels.max()) > identity_count):
        raise LabelError(
            f"labels must lie in 1..{identity_count}, got range "
            f"{int(labels.min())}..{int(labels.max())}"
        )


def id_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """L_ID = -(1/K) sum_k log p(y_k | f_k).

    A true-label probability of exactly zero is clamped to 1e-30, logged and
    counted in ``clamp_events``.
    """
    check_shape("id_loss batch", labels.shape, probabilities.shape[:1])
    _check_labels(labels, probabilities.shape[1])
    sums = probabilities.detach().sum(dim=1)
    if bool(((sums - 1.0).abs() > 1e-6).any()):
        raise NumericalError("id_loss", "probability rows do not sum to 1")
    picked = probabilities.gather(1, (labels.long() - 1).unsqueeze(1)).squeeze(1)
    clamped = int((picked.detach() < PROBABILITY_FLOOR).sum())
    if clamped:
        clamp_events["id_loss"] += clamped
        logger.warning("id_loss: clamped %d zero true-label probabilities", clamped)
        picked = picked.clamp_min(PROBABILITY_FLOOR)
    return ensure_finite("id_loss", -torch.log(picked).mean())


def batch_hard_triplet(embeddings: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    """L_BH: per-anchor hinge(margin + hardest positive - hardest negative), summed.

    The hardest negative is the *closest* one; distances are plain Euclidean.
    """
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    positives = same.sum(dim=1) - 1
    if bool((positives < 1).any()):
        anchor = int((positives < 1).nonzero()[0])
        raise LabelError(f"anchor {anchor} (identity {int(labels[anchor])}) has no positive in the batch")
    if bool(same.all()):
        raise LabelError("batch-hard mining needs at least two identities")
    dist = pairwise_euclidean(embeddings)
    hardest_positive = torch.where(same, dist, torch.full_like(dist, -float("inf"))).amax(dim=1)
    hardest_negative = torch.where(~same, dist, torch.full_like(dist, float("inf"))).amin(dim=1)
    return hinge(margin + hardest_positive - hardest_negative).sum()


def baseline_loss(
    probabilities: torch.Tensor,
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    triplet_margin: float,
) -> torch.Tensor:
    """L_B for one modality: L_ID + L_BH."""
    return id_loss(probabilities, labels) + batch_hard_triplet(embeddings, labels, triplet_margin)


def fused_id_loss(
    probs_rgb: torch.Tensor,
    probs_ir: torch.Tensor,
    labels_rgb: torch.Tensor,
    labels_ir: torch.Tensor,
) -> torch.Tensor:
    """Two separately averaged cross-entropies, summed (the L_D form)."""
    return id_loss(probs_rgb, labels_rgb) + id_loss(probs_ir, labels_ir)


def affinity_matrix(rgb_globals: torch.Tensor, ir_globals: torch.Tensor) -> torch.Tensor:
    """D over the concatenated (RGB, IR) ordering of L2-normalized features."""
    check_shape("affinity feature dims", rgb_globals.shape[1:], ir_globals.shape[1:])
    features = l2_normalize(torch.cat([rgb_globals, ir_globals], dim=0))
    return pairwise_euclidean(features)


def affinity_blocks(d: torch.Tensor, k: int) -> dict[str, torch.Tensor]:
    """The four K* x K* sub-matrices of D."""
    return {
        "rgb_rgb": d[:k, :k], "rgb_ir": d[:k, k:],
        "ir_rgb": d[k:, :k], "ir_ir": d[k:, k:],
    }


def ground_truth_affinity(labels: torch.Tensor) -> torch.Tensor:
    """G^{ij} = 1 iff samples i and j share an identity."""
    return (labels.unsqueeze(0) == labels.unsqueeze(1)).to(DTYPE)


def l1_affinity_loss(d: torch.Tensor, g: torch.Tensor, delta: float) -> torch.Tensor:
    """L_1 = mean |D - (1 - G) * delta|."""
    check_shape("l1 affinity operands", d.shape, g.shape)
    return (d - (1.0 - g) * delta).abs().mean()


def margin_affinity_loss(d: torch.Tensor, g: torch.Tensor, margin: float) -> torch.Tensor:
    """L_A = sum [D*G - (D - m)*(1 - G)]_+ ; positives pay D, negatives pay [m - D]_+."""
    check_shape("margin affinity operands", d.shape, g.shape)
    if margin < 0:
        raise ConfigError(f"affinity margin must be nonnegative, got {margin}")
    return hinge(d * g - (d - margin) * (1.0 - g)).sum()


def final_loss(
    outputs: BatchOutputs,
    labels_rgb: torch.Tensor,
    labels_ir: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """Joint objective with every raw term kept for logging."""
    terms = {
        "loss_b_rgb": baseline_loss(outputs.probs_rgb, outputs.global_rgb, labels_rgb, weights.triplet_margin),
        "loss_b_ir": baseline_loss(outputs.probs_ir, outputs.global_ir, labels_ir, weights.triplet_margin),
        "loss_d": fused_id_loss(outputs.fused_probs_rgb, outputs.fused_probs_ir, labels_rgb, labels_ir),
    }
    d = affinity_matrix(outputs.global_rgb, outputs.global_ir)
    g = ground_truth_affinity(torch.cat([labels_rgb, labels_ir]))
    if weights.affinity_loss == "l1":
        terms["loss_a"] = l1_affinity_loss(d, g, weights.delta)
    else:
        terms["loss_a"] = margin_affinity_loss(d, g, weights.margin)
    for name, value in terms.items():
        ensure_finite(name, value)

    total = (
        weights.baseline * (terms["loss_b_rgb"] + terms["loss_b_ir"])
        + weights.lam * terms["loss_d"]
        + weights.zeta * terms["loss_a"]
    )
    return LossBreakdown(
        baseline_rgb=terms["loss_b_rgb"],
        baseline_ir=terms["loss_b_ir"],
        dff=terms["loss_d"],
        affinity=terms["loss_a"],
        final=ensure_finite("loss_final", total),
    )


GRADCHECK_TOLERANCE = 1e-4
# Every hinge argument, arg-min/max gap and |D - kink| in a gradcheck batch
# stays at least this far from its kink; a 1e-3 step moves none of them by more than 4e-3.
KINK_CLEARANCE = 1e-2
MIN_FEATURE_NORM = 0.5
MAX_REDRAWS = 100


def _mining_clearance(embeddings: torch.Tensor, labels: torch.Tensor, margin: float) -> float:
    """Distance of batch-hard mining from a hinge kink or a change of hardest pair."""
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    others = same & ~torch.eye(len(labels), dtype=torch.bool)
    dist = pairwise_euclidean(embeddings.detach())
    positives = torch.where(others, dist, torch.full_like(dist, -float("inf"))).sort(dim=1, descending=True).values
    negatives = torch.where(~same, dist, torch.full_like(dist, float("inf"))).sort(dim=1).values
    return min(
        kink_distance(margin + positives[:, 0] - negatives[:, 0]),
        kink_distance(negatives[:, 1] - negatives[:, 0]),
        kink_distance(positives[:, 0] - positives[:, 1]),
    )


def kink_clearance(
    global_rgb: torch.Tensor,
    global_ir: torch.Tensor,
    labels: torch.Tensor,
    weights: LossWeights,
) -> float:
    """How far a leaf batch sits from the nearest non-differentiable point of L_Final, L_1 or L_A."""
    clearance = min(
        _mining_clearance(global_rgb, labels, weights.triplet_margin),
        _mining_clearance(global_ir, labels, weights.triplet_margin),
    )
    d = affinity_matrix(global_rgb.detach(), global_ir.detach())
    g = ground_truth_affinity(torch.cat([labels, labels])).bool()
    off_diagonal = ~torch.eye(len(g), dtype=torch.bool)
    return min(
        clearance,
        kink_distance(d[~g], weights.margin),
        kink_distance(d[~g], weights.delta),
        kink_distance(d[g & off_diagonal]),
    )


def gradient_suite(
    seed: int = 0,
    identities: int = 3,
    samples: int = 2,
    dim: int = 8,
    step: float = 1e-3,
    sample_count: int = 100,
    weights: LossWeights = LossWeights(),
) -> dict[str, float]:
    """Worst finite-difference error of every loss on a random batch.

    Parameters are the leaf quantities a forward pass would produce (global
    embeddings and classifier logits of both modalities), so the check
    isolates the losses from the encoder. Draws are repeated from the seeded
    generator until the batch clears every kink by ``KINK_CLEARANCE``.
    """
    generator = torch.Generator().manual_seed(seed)
    k = identities * samples
    classes = identities + 1
    labels = torch.arange(1, identities + 1).repeat_interleave(samples)
    shapes = [
        ("global_rgb", (k, dim)), ("global_ir", (k, dim)),
        ("logits_rgb", (k, classes)), ("logits_ir", (k, classes)),
        ("fused_logits_rgb", (k, classes)), ("fused_logits_ir", (k, classes)),
    ]
    for attempt in range(MAX_REDRAWS):
        params = ParamStore(
            (name, torch.randn(shape, generator=generator, dtype=DTYPE)) for name, shape in shapes
        )
        norms = torch.linalg.vector_norm(torch.cat([params["global_rgb"], params["global_ir"]]), dim=1)
        if float(norms.min()) < MIN_FEATURE_NORM:
            continue
        clearance = kink_clearance(params["global_rgb"], params["global_ir"], labels, weights)
        if clearance >= KINK_CLEARANCE:
            break
        logger.debug("gradcheck draw %d is %.2e from a kink, redrawing", attempt, clearance)
    else:
        raise NumericalError("gradient_suite", f"no kink-free batch in {MAX_REDRAWS} draws for seed {seed}")

    def outputs() -> BatchOutputs:
        return BatchOutputs(
            global_rgb=params["global_rgb"],
            global_ir=params["global_ir"],
            probs_rgb=softmax(params["logits_rgb"]),
            probs_ir=softmax(params["logits_ir"]),
            fused_probs_rgb=softmax(params["fused_logits_rgb"]),
            fused_probs_ir=softmax(params["fused_logits_ir"]),
        )

    def affinity() -> tuple[torch.Tensor, torch.Tensor]:
        d = affinity_matrix(params["global_rgb"], params["global_ir"])
        return d, ground_truth_affinity(torch.cat([labels, labels]))

    objectives = {
        "L_ID": lambda: id_loss(outputs().probs_rgb, labels),
        "L_BH": lambda: batch_hard_triplet(params["global_rgb"], labels, weights.triplet_margin),
        "L_D": lambda: fused_id_loss(outputs().fused_probs_rgb, outputs().fused_probs_ir, labels, labels),
        "L_1": lambda: l1_affinity_loss(*affinity(), weights.delta),
        "L_A": lambda: margin_affinity_loss(*affinity(), weights.margin),
        "L_Final": lambda: final_loss(outputs(), labels, labels, weights).final,
    }
    sample_count = min(sample_count, params.numel())
    return {
        name: finite_diff_check(objective, params, step=step, sample_count=sample_count, rng_seed=seed)
        for name, objective in objectives.items()
    }
