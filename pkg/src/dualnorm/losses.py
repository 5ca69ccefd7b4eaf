"""Classification losses and their logit gradients."""

import numpy as np


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def per_sample_cross_entropy(logits, labels):
    lp = log_softmax(logits)
    return -lp[np.arange(len(labels)), labels]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(labels)
    lp = log_softmax(logits)
    loss = -lp[np.arange(n), labels].mean()
    d = np.exp(lp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def hybrid_loss(logits_clean, logits_adv, labels, alpha):
    """alpha * CE(clean) + (1 - alpha) * CE(adv), each a batch mean."""
    ce_c = per_sample_cross_entropy(logits_clean, labels).mean()
    ce_a = per_sample_cross_entropy(logits_adv, labels).mean()
    return alpha * ce_c + (1.0 - alpha) * ce_a


def kl_regularizer(logits_clean, logits_adv):
    """Mean KL(softmax(clean) || softmax(adv)) over the batch; >= 0."""
    lp = log_softmax(logits_clean)
    lq = log_softmax(logits_adv)
    p = np.exp(lp)
    return float(np.maximum((p * (lp - lq)).sum(axis=1), 0.0).mean())


def kl_regularizer_with_grads(logits_clean, logits_adv):
    """KL value plus gradients w.r.t. both logit arrays (batch-mean scaling).

    With p = softmax(clean), q = softmax(adv) and r = log p - log q:
      d/d(clean) = p * (r - KL_per_sample),   d/d(adv) = q - p.
    """
    n = logits_clean.shape[0]
    lp = log_softmax(logits_clean)
    lq = log_softmax(logits_adv)
    p = np.exp(lp)
    q = np.exp(lq)
    r = lp - lq
    kl_s = (p * r).sum(axis=1, keepdims=True)
    d_clean = p * (r - kl_s) / n
    d_adv = (q - p) / n
    return float(np.maximum(kl_s, 0.0).mean()), d_clean, d_adv
