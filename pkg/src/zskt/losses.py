"""Loss formulas for knowledge transfer.

Everything here is a pure function from Tensors to a scalar Tensor and
differentiates through the autodiff graph:

* forward KL between probability batches (the transfer signal),
* spatial attention maps and the attention-transfer distance,
* the student loss (KL plus a weighted attention term),
* the generator loss (negated KL plus optional extra terms),
* the distillation baseline loss (softened KL + cross-entropy + attention),
* plain cross-entropy.

Conventions: probabilities are clamped at 1e-12 inside logs, 0*log 0 counts
as 0, and per-sample quantities are averaged over the batch.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeMismatch

PROB_FLOOR = 1e-12
EXTRA_KINDS = ("teacher-entropy", "student-entropy", "consistency", "diversity")
DIVERGENCES = ("forward-kl", "reverse-kl", "js")


@dataclass(frozen=True)
class ExtraLossConfig:
    """One optional generator-loss term.

    kind selects the term, gamma weights it, sign flips it (entropy terms can
    encourage or penalize; no default stance is taken). augmentation must be
    set exactly for the consistency kind: ("gaussian-noise", sigma) or
    ("gaussian-blur", kernel_size).
    """

    kind: str
    gamma: float
    sign: int = 1
    augmentation: tuple = None

    def __post_init__(self):
        if self.kind not in EXTRA_KINDS:
            raise ConfigError(f"extra loss kind must be one of {EXTRA_KINDS}, got '{self.kind}'")
        if not np.isfinite(self.gamma):
            raise ConfigError(f"extra loss gamma must be finite, got {self.gamma}")
        if self.sign not in (1, -1):
            raise ConfigError(f"extra loss sign must be +1 or -1, got {self.sign}")
        if (self.augmentation is not None) != (self.kind == "consistency"):
            raise ConfigError("augmentation must be set exactly for the consistency kind")
        if self.augmentation is not None:
            name = self.augmentation[0]
            if name not in ("gaussian-noise", "gaussian-blur"):
                raise ConfigError(f"unknown augmentation '{name}'")


def _check_prob_batch(name, p):
    if p.data.ndim != 2:
        raise ShapeMismatch(f"{name}: need a 2-d probability batch, got {p.shape}")
    rows = p.data.sum(axis=1)
    if np.abs(rows - 1.0).max() > 1e-6:
        raise DataError(f"{name}: rows must sum to 1 within 1e-6, worst off by "
                        f"{np.abs(rows - 1.0).max():.3g}")


def forward_kl(t, s):
    """Mean over the batch of sum_i t_i * log(t_i / s_i).

    Inputs are probability batches (rows sum to 1 within 1e-6). Differentiable
    w.r.t. both arguments; logs are clamped at 1e-12 so zero entries follow
    the 0*log 0 = 0 convention.
    """
    if t.shape != s.shape:
        raise ShapeMismatch(f"forward_kl: shapes differ, {t.shape} vs {s.shape}")
    _check_prob_batch("forward_kl t", t)
    _check_prob_batch("forward_kl s", s)
    log_ratio = ad.sub(ad.log(ad.clamp_min(t, PROB_FLOOR)),
                       ad.log(ad.clamp_min(s, PROB_FLOOR)))
    per_sample = ad.reduce_sum(ad.mul(t, log_ratio), axis=1)
    return ad.reduce_mean(per_sample)


def reverse_kl(t, s):
    """KL(s || t); ablation divergence."""
    return forward_kl(s, t)


def js_divergence(t, s):
    """Jensen-Shannon divergence; ablation divergence."""
    m = ad.scalar_mul(ad.add(t, s), 0.5)
    return ad.scalar_mul(ad.add(forward_kl(t, m), forward_kl(s, m)), 0.5)


def divergence(kind, t, s):
    if kind == "forward-kl":
        return forward_kl(t, s)
    if kind == "reverse-kl":
        return reverse_kl(t, s)
    if kind == "js":
        return js_divergence(t, s)
    raise ConfigError(f"divergence must be one of {DIVERGENCES}, got '{kind}'")


def entropy(p):
    """Mean over the batch of -sum_i p_i log p_i."""
    _check_prob_batch("entropy", p)
    plogp = ad.mul(p, ad.log(ad.clamp_min(p, PROB_FLOOR)))
    return ad.scalar_mul(ad.reduce_mean(ad.reduce_sum(plogp, axis=1)), -1.0)


def attention_map(block, normalize=True):
    """Spatial attention map of a batch x channels x h x w block.

    Mean over channels of squared activations, flattened to batch x (h*w);
    with normalize=True each row is divided by its L2 norm (zero rows stay
    zero, guarding dead blocks).
    """
    if block.data.ndim != 4:
        raise ShapeMismatch(f"attention_map: need a 4-d block, got {block.shape}")
    n, _, h, w = block.shape
    amap = ad.reshape(ad.reduce_mean(ad.square(block), axis=1), (n, h * w))
    if not normalize:
        return amap
    norm = ad.l2_norm(amap, axis=1, keepdims=True)
    return ad.mul(amap, ad.reciprocal(ad.clamp_min(norm, PROB_FLOOR)))


def attention_distance(t_acts, s_acts):
    """Sum over taps of the batch-mean L2 distance between normalized maps."""
    if len(t_acts.blocks) != len(s_acts.blocks):
        raise ShapeMismatch(
            f"attention_distance: tap counts differ, {len(t_acts.blocks)} vs {len(s_acts.blocks)}")
    total = None
    for (t_name, t_block), (s_name, s_block) in zip(t_acts.blocks, s_acts.blocks):
        tm = attention_map(t_block)
        sm = attention_map(s_block)
        if tm.shape != sm.shape:
            raise ShapeMismatch(
                f"attention_distance: map shapes differ at {t_name}/{s_name}, "
                f"{tm.shape} vs {sm.shape}")
        d = ad.reduce_mean(ad.l2_norm(ad.sub(tm, sm), axis=1))
        total = d if total is None else ad.add(total, d)
    if total is None:
        return ad.Tensor(np.array(0.0))
    return total


def student_loss(t_logits, s_logits, t_acts, s_acts, beta, divergence_kind="forward-kl"):
    """Transfer loss for the student: divergence term plus beta * attention."""
    if beta < 0:
        raise ConfigError(f"student_loss: beta must be >= 0, got {beta}")
    kl = divergence(divergence_kind, ad.softmax(t_logits), ad.softmax(s_logits))
    if beta == 0:
        return kl
    return ad.add(kl, ad.scalar_mul(attention_distance(t_acts, s_acts), beta))


def generator_loss(t_logits, s_logits, extras=(), t_acts=None, t_aug_logits=None,
                   divergence_kind="forward-kl"):
    """Adversarial generator loss: negated divergence plus optional extras.

    teacher-entropy / student-entropy add sign*gamma*H(probs); consistency
    adds sign*gamma*KL(T(x) || T(augmented x)) and needs t_aug_logits;
    diversity adds sign*(-gamma)*mean(phi phi^T) of the teacher penultimate
    features and needs t_acts.
    """
    t_probs = ad.softmax(t_logits)
    s_probs = ad.softmax(s_logits)
    loss = ad.scalar_mul(divergence(divergence_kind, t_probs, s_probs), -1.0)
    for extra in extras:
        if not isinstance(extra, ExtraLossConfig):
            raise ConfigError(f"extras must be ExtraLossConfig, got {type(extra).__name__}")
        w = extra.sign * extra.gamma
        if extra.kind == "teacher-entropy":
            term = ad.scalar_mul(entropy(t_probs), w)
        elif extra.kind == "student-entropy":
            term = ad.scalar_mul(entropy(s_probs), w)
        elif extra.kind == "consistency":
            if t_aug_logits is None:
                raise ConfigError("consistency extra needs t_aug_logits")
            term = ad.scalar_mul(forward_kl(t_probs, ad.softmax(t_aug_logits)), w)
        else:  # diversity
            if t_acts is None:
                raise ConfigError("diversity extra needs t_acts")
            phi = t_acts.penultimate
            gram = ad.matmul(phi, _transpose2d(phi))
            term = ad.scalar_mul(ad.reduce_mean(gram), -w)
        loss = ad.add(loss, term)
    return loss


def _transpose2d(t):
    """Transpose of a 2-d tensor through reshape-free matmul plumbing."""
    if t.data.ndim != 2:
        raise ShapeMismatch(f"transpose: need 2-d, got {t.shape}")
    out = t.data.T.copy()
    return ad._node(out, (t,), lambda g: (g.T.copy(),))


def cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of logits against integer class labels.

    reduction="mean" averages the batch; "sum" adds per-sample terms, which
    keeps rows independent under differentiation.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy: need 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"cross_entropy: labels must lie in [0, {c - 1}]")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    logp = ad.log(ad.clamp_min(ad.softmax(logits), PROB_FLOOR))
    picked = ad.reduce_sum(ad.mul(ad.Tensor(onehot), logp), axis=1)
    if reduction == "sum":
        return ad.scalar_mul(ad.reduce_sum(picked), -1.0)
    return ad.scalar_mul(ad.reduce_mean(picked), -1.0)


def kd_at_loss(t_logits, s_logits, s_labels, t_acts, s_acts,
               temperature=4.0, alpha=0.9, beta=0.0):
    """Distillation baseline: softened KL + hard-label CE + attention term.

    alpha*tau^2*KL(softmax(t/tau) || softmax(s/tau))
      + (1-alpha)*CE(s_logits, labels) + beta*attention distance.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"kd_at_loss: alpha must lie in [0,1], got {alpha}")
    if temperature <= 0:
        raise ConfigError(f"kd_at_loss: temperature must be positive, got {temperature}")
    inv_t = 1.0 / temperature
    kl = forward_kl(ad.softmax(ad.scalar_mul(t_logits, inv_t)),
                    ad.softmax(ad.scalar_mul(s_logits, inv_t)))
    loss = ad.scalar_mul(kl, alpha * temperature * temperature)
    if alpha < 1.0:
        ce = cross_entropy(s_logits, s_labels)
        loss = ad.add(loss, ad.scalar_mul(ce, 1.0 - alpha))
    if beta:
        loss = ad.add(loss, ad.scalar_mul(attention_distance(t_acts, s_acts), beta))
    return loss
