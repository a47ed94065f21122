"""Loss functions for GAN-OVA and its baselines.

Every loss here is a quantity to MINIMIZE.  Discriminator losses that come
from a maximized value function are returned negated, and the gradient
penalty is added with a positive weight (the usual WGAN-GP convention).

Target vectors follow the One-Vs-All layout:

* JS: ``N + 1`` probabilities ``[c_1, ..., c_N, c_fake]``; real rows are
  one-hot at their class, generated rows one-hot at ``c_fake`` (index N).
* EM: ``N`` signed entries; real rows ``+onehot(c)``, generated rows
  ``-onehot(c)``.  The negative sign encodes the subtraction of the
  generated term, so the critic gap is ``sum(t * D(x))`` over both halves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import DataError, one_hot

JS, EM = "js", "em"


@dataclass(frozen=True)
class TargetScheme:
    method: str
    n_classes: int

    def __post_init__(self):
        if self.method not in (JS, EM):
            raise ValueError(f"method must be {JS!r} or {EM!r}, got {self.method!r}")
        if self.n_classes < 1:
            raise ValueError("need at least one class")

    @property
    def width(self) -> int:
        return self.n_classes + 1 if self.method == JS else self.n_classes

    @property
    def fake_index(self) -> Optional[int]:
        return self.n_classes if self.method == JS else None


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"penalty weight must be >= 0, got {self.lam}")


@dataclass
class LossBundle:
    loss: Tensor
    diagnostics: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.loss.item()


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise DataError(f"labels must lie in [0, {n})")
    return labels


def _check_width(name: str, t: Tensor, width: int) -> None:
    if t.ndim != 2 or t.shape[1] != width:
        raise ContractError(f"{name}: expected width {width}, got shape {t.shape}")


def build_targets_js(labels, scheme: TargetScheme, is_real: bool) -> Tensor:
    labels = _check_labels(labels, scheme.n_classes)
    out = np.zeros((labels.size, scheme.n_classes + 1))
    out[np.arange(labels.size), labels if is_real else scheme.n_classes] = 1.0
    return Tensor(out)


def build_targets_em(labels, scheme: TargetScheme, is_real: bool) -> Tensor:
    labels = _check_labels(labels, scheme.n_classes)
    out = np.zeros((labels.size, scheme.n_classes))
    out[np.arange(labels.size), labels] = 1.0 if is_real else -1.0
    return Tensor(out)


# ------------------------------------------------------------------------ JS


def loss_d_js(real_logits: Tensor, fake_logits: Tensor, real_labels, fake_labels,
              scheme: TargetScheme) -> LossBundle:
    """Softmax cross-entropy averaged over the pooled real + generated rows.

    Real rows are pushed toward their class, generated rows toward c_fake.
    """
    w = scheme.width
    _check_width("loss_d_js real", real_logits, w)
    _check_width("loss_d_js fake", fake_logits, w)
    ce_r = ad.softmax_cross_entropy(real_logits, build_targets_js(real_labels, scheme, True))
    ce_f = ad.softmax_cross_entropy(fake_logits, build_targets_js(fake_labels, scheme, False))
    n = ce_r.size + ce_f.size
    loss = ad.scale(ad.add(ad.sum(ce_r), ad.sum(ce_f)), 1.0 / n)
    return LossBundle(loss, {"ce_real": float(ce_r.values.mean()), "ce_fake": float(ce_f.values.mean())})


def loss_g_js(fake_logits: Tensor, labels, scheme: TargetScheme) -> LossBundle:
    """Non-saturating generator loss: cross-entropy toward the condition class."""
    _check_width("loss_g_js", fake_logits, scheme.width)
    ce = ad.softmax_cross_entropy(fake_logits, build_targets_js(labels, scheme, True))
    return LossBundle(ad.mean(ce))


# ------------------------------------------------------------------------ EM


def loss_d_em(real_scores: Tensor, fake_scores: Tensor, labels_r, labels_f, scheme: TargetScheme,
              penalty: Optional[LossBundle] = None, cfg: PenaltyConfig = PenaltyConfig()) -> LossBundle:
    """``-(mean selected real score - mean selected fake score) + lam * penalty``.

    ``diagnostics["gap"]`` is the un-penalized gap, i.e. the Wasserstein estimate.
    """
    w = scheme.n_classes
    _check_width("loss_d_em real", real_scores, w)
    _check_width("loss_d_em fake", fake_scores, w)
    t_r = build_targets_em(labels_r, scheme, True)
    t_f = build_targets_em(labels_f, scheme, False)
    gap = ad.add(ad.mean(ad.sum(ad.mul(real_scores, t_r), axis=1)),
                 ad.mean(ad.sum(ad.mul(fake_scores, t_f), axis=1)))
    loss = ad.neg(gap)
    diag = {"gap": gap.item(), "penalty": 0.0}
    if penalty is not None:
        loss = ad.add(loss, ad.scale(penalty.loss, cfg.lam))
        diag["penalty"] = penalty.value
    return LossBundle(loss, diag)


def loss_g_em(fake_scores: Tensor, labels, scheme: TargetScheme) -> LossBundle:
    _check_width("loss_g_em", fake_scores, scheme.n_classes)
    t = build_targets_em(labels, scheme, True)
    return LossBundle(ad.neg(ad.mean(ad.sum(ad.mul(fake_scores, t), axis=1))))


def interpolate_samples(x: Tensor, x_fake: Tensor, rng: Optional[np.random.Generator] = None,
                        eps: Optional[np.ndarray] = None) -> Tensor:
    """``eps * x + (1 - eps) * x_fake`` with one ``eps ~ U[0, 1]`` per row.

    The result is detached; watch it on a tape before taking the penalty.
    """
    x, x_fake = ad.as_tensor(x), ad.as_tensor(x_fake)
    if x.shape != x_fake.shape:
        raise ad.DimensionError(f"cannot interpolate {x.shape} with {x_fake.shape}")
    if eps is None:
        eps = rng.uniform(0.0, 1.0, size=(x.shape[0], 1))
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64).reshape(-1, 1), x.shape)
    return Tensor(eps * x.values + (1.0 - eps) * x_fake.values)


def gradient_penalty(critic: Callable[[Tensor], Tensor], x_hat: Tensor, labels, scheme: TargetScheme,
                     tape: ad.Tape) -> LossBundle:
    """``mean_i (||d s_i / d x_hat_i|| - 1)^2`` with ``s_i`` the score of row i's class.

    The gradient is taken with :func:`autodiff.grad_graph`, so the penalty
    stays differentiable w.r.t. the critic's parameters.
    """
    scores = critic(x_hat)
    _check_width("gradient_penalty", scores, scheme.n_classes)
    t = build_targets_em(labels, scheme, True)
    selected = ad.sum(ad.mul(scores, t))
    grad = ad.grad_graph(selected, x_hat, tape)
    norms = ad.l2_norm_rows(grad)
    pen = ad.mean(ad.square(ad.shift(norms, -1.0)))
    return LossBundle(pen, {"penalty": pen.item(), "grad_norm": float(norms.values.mean())})


# ----------------------------------------------------------------- baselines


def _per_sample(score: Tensor) -> Tensor:
    if score.ndim == 2:
        if score.shape[1] != 1:
            raise ContractError(f"expected one score per sample, got shape {score.shape}")
        return ad.sum(score, axis=1)
    return score


def loss_vanilla_d(real_score: Tensor, fake_score: Tensor) -> LossBundle:
    """Sigmoid cross-entropy of the real/fake discriminator, pooled mean.

    ``-log sigmoid(s)`` for real rows, ``-log(1 - sigmoid(s))`` for fakes.
    """
    r, f = _per_sample(real_score), _per_sample(fake_score)
    n = r.size + f.size
    loss = ad.scale(ad.add(ad.sum(ad.softplus(ad.neg(r))), ad.sum(ad.softplus(f))), 1.0 / n)
    return LossBundle(loss)


def loss_vanilla_g(fake_score: Tensor) -> LossBundle:
    """Non-saturating generator loss ``-log sigmoid(D(G(z)))``."""
    return LossBundle(ad.mean(ad.softplus(ad.neg(_per_sample(fake_score)))))


def loss_wgan_d(real_score: Tensor, fake_score: Tensor, penalty: Optional[LossBundle] = None,
                cfg: PenaltyConfig = PenaltyConfig()) -> LossBundle:
    r, f = _per_sample(real_score), _per_sample(fake_score)
    gap = ad.sub(ad.mean(r), ad.mean(f))
    loss = ad.neg(gap)
    if penalty is not None:
        loss = ad.add(loss, ad.scale(penalty.loss, cfg.lam))
    return LossBundle(loss, {"gap": gap.item()})


def loss_wgan_g(fake_score: Tensor) -> LossBundle:
    return LossBundle(ad.neg(ad.mean(_per_sample(fake_score))))


def loss_acgan_g(fake_adv: Tensor, fake_cls_logits: Tensor, labels) -> LossBundle:
    """Non-saturating adversarial term plus class cross-entropy on the fakes."""
    n_classes = fake_cls_logits.shape[1]
    t = one_hot(_check_labels(labels, n_classes), n_classes)
    adv = loss_vanilla_g(fake_adv)
    cls = ad.mean(ad.softmax_cross_entropy(fake_cls_logits, t))
    return LossBundle(ad.add(adv.loss, cls), {"adv": adv.value, "cls": cls.item()})


def loss_acgan(real_adv: Tensor, fake_adv: Tensor, real_cls_logits: Tensor, fake_cls_logits: Tensor,
               labels) -> tuple[LossBundle, LossBundle]:
    """ACGAN discriminator and generator losses; real and fake rows share ``labels``.

    The discriminator term is the pooled adversarial loss plus class
    cross-entropy pooled over real and generated rows.
    """
    n_classes = real_cls_logits.shape[1]
    _check_width("loss_acgan real", real_cls_logits, n_classes)
    _check_width("loss_acgan fake", fake_cls_logits, n_classes)
    t = one_hot(_check_labels(labels, n_classes), n_classes)
    ce_r = ad.softmax_cross_entropy(real_cls_logits, t)
    ce_f = ad.softmax_cross_entropy(fake_cls_logits, t)
    adv_d = loss_vanilla_d(real_adv, fake_adv)
    cls_d = ad.scale(ad.add(ad.sum(ce_r), ad.sum(ce_f)), 1.0 / (ce_r.size + ce_f.size))
    d = LossBundle(ad.add(adv_d.loss, cls_d), {"adv": adv_d.value, "cls": cls_d.item()})
    return d, loss_acgan_g(fake_adv, fake_cls_logits, labels)
