"""Straight-line scalar reference implementations used by the tests.

Plain python floats and loops only; nothing here touches torch so the
reference stays independent of the vectorised code under test.
"""
import math


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def indicator(ca, cb, alpha):
    return 1 if (alpha < ca and ca < cb) else 0


def contrastive(emb_a, emb_b, conf_a, conf_b, negs, tau, alpha, include_positive=True):
    """``negs`` is a list of K vectors or, per anchor, a list of lists."""
    total = 0.0
    n_eff = 0
    for i in range(len(emb_a)):
        if not indicator(conf_a[i], conf_b[i], alpha):
            continue
        n_eff += 1
        bank = negs[i] if isinstance(negs[0][0], (list, tuple)) else negs
        s_pos = dot(emb_a[i], emb_b[i]) / tau
        terms = [dot(emb_a[i], k) / tau for k in bank]
        if include_positive:
            terms.append(s_pos)
        m = max(terms)
        denom = 0.0
        for t in terms:
            denom += math.exp(t - m)
        total += -(s_pos - m - math.log(denom))
    return 0.0 if n_eff == 0 else total / n_eff


def balance(pred, gt, alpha, eps, weighting="frequency"):
    n = len(pred)
    n1 = sum(gt)
    n2 = n - n1
    if weighting == "frequency":
        l1, l2 = n1 / n, n2 / n
    elif weighting == "inverse_frequency":
        l1, l2 = n2 / n, n1 / n
    else:
        l1, l2 = 1.0, 1.0
    acc = 0.0
    for b, g in zip(pred, gt):
        if g == 1:
            acc += l1 * (1 - b) ** alpha * math.log(b + eps)
        else:
            acc += l2 * b ** alpha * math.log(1 - b + eps)
    return -acc / n


def bce(pred, gt, eps):
    acc = 0.0
    for b, g in zip(pred, gt):
        acc += g * math.log(b + eps) + (1 - g) * math.log(1 - b + eps)
    return -acc / len(pred)


def construction(pred, gt, reduction="mean"):
    s = 0.0
    for p, y in zip(pred, gt):
        s += (p - y) * (p - y)
    return s / len(pred) if reduction == "mean" else s


def weight_decay(flat_params, lam):
    s = 0.0
    for w in flat_params:
        s += w * w
    return lam / 2 * s


def total(stage_terms, c, w):
    s = c + w
    for a, b in stage_terms:
        s += a
        s += b
    return s


def sweep_counts(prob, gt, t):
    """(iou_fg, iou_bg, miou) by counting each pixel."""
    tp = fp = fn = tn = 0
    for p, g in zip(prob, gt):
        pr = 1 if p >= t else 0
        if pr and g:
            tp += 1
        elif pr and not g:
            fp += 1
        elif not pr and g:
            fn += 1
        else:
            tn += 1
    fg = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    bg = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
    return fg, bg, (fg + bg) / 2


def central_difference(f, x, h=1e-4):
    """Gradient of scalar ``f`` at the flat list ``x``."""
    grad = []
    for i in range(len(x)):
        xp = list(x)
        xm = list(x)
        xp[i] += h
        xm[i] -= h
        grad.append((f(xp) - f(xm)) / (2 * h))
    return grad
