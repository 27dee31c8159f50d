"""Contrastive alignment loss, cross-entropy, and their blended objective.

The contrastive batch stacks both views as [z_1^S..z_B^S, z_1^I..z_B^I];
anchors range over all 2B embeddings and the denominator set is every
non-anchor embedding, so the batch loss carries a 1/(2B) normalizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError

_NEG_INF = -1e9  # masks the anchor's own similarity out of the denominator


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    mode: str = "cross_view"  # cross_view | within_view | off
    beta: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.mode not in ("cross_view", "within_view", "off"):
            raise ConfigError(f"unknown contrastive mode {self.mode!r}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError("beta must lie in [0,1]")


def positive_sets(labels, mode: str, anchor: int):
    """Positive and denominator index sets for one anchor among 2B embeddings.

    Returns (same_view_positives, other_view_positives, all_others); in
    within_view mode the other-view positives are empty but the other-view
    embeddings stay in the denominator set.
    """
    labels = np.asarray(labels)
    b = labels.shape[0]
    if b < 2:
        raise DataError("contrastive loss needs a batch of at least 2 samples")
    if mode not in ("cross_view", "within_view"):
        raise ConfigError(f"positive sets undefined for mode {mode!r}")
    full = np.concatenate([labels, labels])
    view = anchor // b  # 0 = sequence half, 1 = image half
    same_view = [i for i in range(view * b, (view + 1) * b)
                 if i != anchor and full[i] == full[anchor]]
    if mode == "cross_view":
        other = (1 - view) * b
        other_view = [i for i in range(other, other + b) if full[i] == full[anchor]]
    else:
        other_view = []
    everyone = [i for i in range(2 * b) if i != anchor]
    return same_view, other_view, everyone


def _positive_mask(labels: np.ndarray, mode: str) -> np.ndarray:
    """(2B, 2B) float mask of positives per anchor row; diagonal excluded."""
    b = labels.shape[0]
    full = np.concatenate([labels, labels])
    same_class = full[:, None] == full[None, :]
    mask = np.zeros((2 * b, 2 * b), dtype=bool)
    mask[:b, :b] = same_class[:b, :b]
    mask[b:, b:] = same_class[b:, b:]
    if mode == "cross_view":
        mask[:b, b:] = same_class[:b, b:]
        mask[b:, :b] = same_class[b:, :b]
    np.fill_diagonal(mask, False)
    return mask.astype(np.float64)


def sica_loss(z_seq: Tensor, z_img: Tensor, labels, config: ContrastiveConfig) -> Tensor:
    """Supervised sequence-image alignment loss over a batch of unit embeddings."""
    if config.mode == "off":
        raise ConfigError("sica_loss called with mode off")
    labels = np.asarray(labels)
    b = labels.shape[0]
    if b < 2:
        raise DataError("contrastive loss needs a batch of at least 2 samples")
    if z_seq.shape != z_img.shape or z_seq.shape[0] != b:
        raise DataError(f"embedding shapes {z_seq.shape}/{z_img.shape} do not match batch {b}")
    if not (np.isfinite(z_seq.data).all() and np.isfinite(z_img.data).all()):
        raise NumericError("non-finite embedding passed to sica_loss")

    z = ad.concat([z_seq, z_img], axis=0)                      # (2B, d)
    sims = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / config.temperature)
    dtype = sims.dtype

    diag = np.zeros((2 * b, 2 * b), dtype=dtype)
    np.fill_diagonal(diag, _NEG_INF)
    masked = ad.add(sims, Tensor(diag))

    row_max = masked.data.max(axis=1)                          # detached stabilizer
    shifted = ad.add(masked, Tensor(np.repeat(-row_max[:, None], 2 * b, axis=1).astype(dtype)))
    lse = ad.add(ad.log(ad.tsum(ad.exp(shifted), axis=1)), Tensor(row_max))

    pos = _positive_mask(labels, config.mode)
    counts = pos.sum(axis=1)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    pos_sum = ad.tsum(ad.mul(sims, Tensor(pos.astype(dtype))), axis=1)

    # per anchor: (1/|P|) * (|P| * lse - sum of positive sims); 0 when |P| empty
    anchored = ad.sub(ad.mul(lse, Tensor((counts * inv).astype(dtype))),
                      ad.mul(pos_sum, Tensor(inv.astype(dtype))))
    return ad.scale(ad.tsum(anchored), 1.0 / (2 * b))


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if c < 2:
        raise DataError("ce_loss needs at least 2 classes")
    if labels.shape != (b,):
        raise DataError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError("label outside class range")
    dtype = logits.dtype

    row_max = logits.data.max(axis=1)
    shifted = ad.add(logits, Tensor(np.repeat(-row_max[:, None], c, axis=1).astype(dtype)))
    lse = ad.add(ad.log(ad.tsum(ad.exp(shifted), axis=1)), Tensor(row_max))
    one_hot = np.zeros((b, c), dtype=dtype)
    one_hot[np.arange(b), labels] = 1.0
    picked = ad.tsum(ad.mul(logits, Tensor(one_hot)), axis=1)
    return ad.tmean(ad.sub(lse, picked))


def care_loss(sica: Tensor | None, ce: Tensor, beta: float) -> Tensor:
    """beta * sica + (1 - beta) * ce; the endpoints return the terms exactly."""
    if not (0.0 <= beta <= 1.0):
        raise ConfigError("beta must lie in [0,1]")
    if beta == 0.0 or sica is None:
        return ce
    if beta == 1.0:
        return sica
    return ad.add(ad.scale(sica, beta), ad.scale(ce, 1.0 - beta))
