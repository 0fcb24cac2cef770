"""Classification and skeleton-text contrastive objectives.

The contrastive path contrasts a batch of skeleton part features against the
matching text features in both directions: cosine similarities are scaled by
a temperature, soft-maxed per row, and compared against row-stochastic
multi-positive targets (all same-label pairs are positive).  Three variants
ship: soft-target KL divergence (kld), summed-positive-mass contrastive (cl),
and Jensen-Shannon divergence (jsd).  Natural logarithms throughout.

Text features are a frozen bank, so gradients flow to skeleton features only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateFeatureError, ShapeError

LOSS_VARIANTS = ("kld", "cl", "jsd")


@dataclass
class ContrastBatch:
    """One contrast slot: aligned skeleton/text feature rows plus labels."""

    skel_feats: np.ndarray   # [B, D]
    text_feats: np.ndarray   # [B, D]
    labels: np.ndarray       # [B]
    tau: float

    def __post_init__(self):
        if self.skel_feats.shape != self.text_feats.shape:
            raise ShapeError(f"skeleton {self.skel_feats.shape} vs text {self.text_feats.shape}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of the true labels."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ConfigError(f"label outside [0,{logits.shape[1]})")
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels):
    """d(mean CE)/d(logits), same dtype as logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1
    return p / len(labels)


def _normalize_rows(x, what):
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))
    if norms.min() < 1e-12:
        raise DegenerateFeatureError(f"zero-norm row in {what} features")
    return x / norms[:, None].astype(x.dtype), norms


def similarity_distributions(batch: ContrastBatch):
    """Row-softmaxed cosine similarities in both directions.

    Returns (p_s2t, p_t2s): p_s2t[i] is the distribution of skeleton i over
    the batch's text rows, p_t2s[i] of text i over skeleton rows.
    """
    s_hat, _ = _normalize_rows(batch.skel_feats, "skeleton")
    t_hat, _ = _normalize_rows(batch.text_feats, "text")
    sim = s_hat @ t_hat.T
    p_s2t = np.exp(_log_softmax(sim / batch.tau))
    p_t2s = np.exp(_log_softmax(sim.T / batch.tau))
    return p_s2t, p_t2s


def build_targets(labels):
    """Row-stochastic multi-positive targets: y_ij > 0 iff labels match."""
    labels = np.asarray(labels)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def _check_stochastic(p, name):
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ConfigError(f"rows of {name} must sum to 1")


def _kl_rows(y, p):
    """Per-row KL(y || p) with 0 log 0 = 0; p must be strictly positive."""
    ratio = np.where(y > 0, y / np.maximum(p, 1e-300), 1.0)
    return (np.where(y > 0, y * np.log(ratio), 0.0)).sum(axis=1)


def _js_rows(a, b):
    m = 0.5 * (a + b)
    return 0.5 * (_kl_rows(a, m) + _kl_rows(b, m))


def contrastive_loss(p_s2t, p_t2s, targets, variant: str) -> float:
    """Symmetric two-direction divergence between predictions and targets."""
    if variant not in LOSS_VARIANTS:
        raise ConfigError(f"unknown loss variant {variant!r}; choose from {LOSS_VARIANTS}")
    for name, p in (("p_s2t", p_s2t), ("p_t2s", p_t2s), ("targets", targets)):
        _check_stochastic(p, name)
    y = np.asarray(targets, dtype=np.float64)
    pa = np.asarray(p_s2t, dtype=np.float64)
    pb = np.asarray(p_t2s, dtype=np.float64)
    if variant == "kld":
        per_row = _kl_rows(y, pa) + _kl_rows(y, pb)
    elif variant == "jsd":
        per_row = _js_rows(y, pa) + _js_rows(y, pb)
    else:  # cl: negative log of total positive probability mass per row
        mask = y > 0
        per_row = -np.log((pa * mask).sum(axis=1)) - np.log((pb * mask).sum(axis=1))
    return float(0.5 * per_row.mean())


def _divergence_dp(p, y, variant, scale):
    """d(loss)/dp for one direction, already including the 1/(2B) scale."""
    if variant == "kld":
        return np.where(y > 0, -y / p, 0.0) * scale
    if variant == "jsd":
        m = 0.5 * (y + p)
        return 0.5 * np.log(p / m) * scale
    mask = (y > 0).astype(p.dtype)
    pos_mass = (p * mask).sum(axis=1, keepdims=True)
    return -mask / pos_mass * scale


def contrastive_loss_and_grad(batch: ContrastBatch, variant: str):
    """Loss value plus its gradient w.r.t. the skeleton features.

    The text bank is frozen, so no text gradient is produced.
    """
    s = np.asarray(batch.skel_feats, dtype=np.float64)
    t = np.asarray(batch.text_feats, dtype=np.float64)
    s_hat, s_norm = _normalize_rows(s, "skeleton")
    t_hat, _ = _normalize_rows(t, "text")
    sim = s_hat @ t_hat.T
    p_a = np.exp(_log_softmax(sim / batch.tau))
    p_b = np.exp(_log_softmax(sim.T / batch.tau))
    y = build_targets(batch.labels)
    loss = contrastive_loss(p_a, p_b, y, variant)

    b = len(y)
    scale = 1.0 / (2 * b)
    dsim = np.zeros_like(sim)
    for p, transpose in ((p_a, False), (p_b, True)):
        dp = _divergence_dp(p, y, variant, scale)
        dlogits = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        dsim += dlogits.T / batch.tau if transpose else dlogits / batch.tau
    ds_hat = dsim @ t_hat
    ds = (ds_hat - s_hat * (ds_hat * s_hat).sum(axis=1, keepdims=True)) / s_norm[:, None]
    return loss, ds.astype(batch.skel_feats.dtype)


def multi_part_loss(per_slot_losses) -> float:
    """Arithmetic mean of per-slot contrastive losses."""
    per_slot_losses = list(per_slot_losses)
    if not per_slot_losses:
        raise ConfigError("need at least one contrast slot")
    return float(np.mean(per_slot_losses))


def total_loss(ce: float, con_multi: float, lam: float) -> float:
    """Classification loss plus the weighted multi-part contrastive term."""
    if lam < 0:
        raise ConfigError(f"loss weight must be nonnegative, got {lam}")
    return ce + lam * con_multi


def part_cls_baseline_loss(part_logits, labels) -> float:
    """Mean over parts of per-part classification cross-entropy.

    The training objective adds this to the global cross-entropy; this
    function returns only the part term.
    """
    return float(np.mean([cross_entropy(part_logits[k], labels)
                          for k in range(part_logits.shape[0])]))


def part_cls_baseline_grad(part_logits, labels):
    """d(part term)/d(part_logits), shape [K, B, C]."""
    k = part_logits.shape[0]
    return np.stack([cross_entropy_grad(part_logits[i], labels) / k for i in range(k)])
