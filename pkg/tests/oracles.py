"""Scalar reference implementations used by the tests.

Everything here is written with explicit Python loops over plain floats so
it shares no code path with the vectorized library functions.
"""

import itertools
import math

IGNORE = 255
EPS = 1e-8


def _cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def partition_sets(tags):
    """P_i, N_i for every anchor, straight from the rule text (0-based)."""
    n = len(tags)
    P, N = [], []
    for i in range(n):
        if tags[i] == "o":
            P.append({j for j in range(n) if j != i and tags[j] == "o"})
            N.append({j for j in range(n) if tags[j] == "a"})
        else:
            P.append({i})
            N.append({j for j in range(n) if j != i})
    return P, N


def contrastive(pi, tags, tau):
    P, N = partition_sets(tags)
    total = 0.0
    for i in range(len(pi)):
        num = sum(math.exp(_cos(pi[i], pi[p]) / tau) for p in P[i])
        den = sum(math.exp(_cos(pi[i], pi[j]) / tau) for j in P[i] | N[i])
        total += -math.log(num / den)
    return total / len(pi)


def _softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def jsd_rows(a, b):
    """JSD per row of two lists of logit rows."""
    out = []
    for ra, rb in zip(a, b):
        p, q = _softmax(ra), _softmax(rb)
        m = [(x + y) / 2 for x, y in zip(p, q)]
        kl_p = sum(x * math.log(x / z) for x, z in zip(p, m) if x > 0)
        kl_q = sum(y * math.log(y / z) for y, z in zip(q, m) if y > 0)
        out.append(0.5 * (kl_p + kl_q))
    return out


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _bce(p, t):
    return -(t * math.log(p + EPS) + (1 - t) * math.log(1 - p + EPS))


def mask_consistency(a, b):
    """Flat lists of logits."""
    vals = []
    for x, y in zip(a, b):
        pa, pb = _sig(x), _sig(y)
        vals.append(0.5 * (_bce(pa, pb) + _bce(pb, pa)))
    return sum(vals) / len(vals)


def dice(prob, target, smooth=1.0):
    """One mask given as flat lists."""
    inter = sum(p * t for p, t in zip(prob, target))
    return 1 - (2 * inter + smooth) / (sum(prob) + sum(target) + smooth)


def reg_language(t, t0):
    """t, t0: K x C lists. Mean over k of -log softmax_j(cos(t_k, t0_j))[k]."""
    total = 0.0
    k = len(t)
    for i in range(k):
        sims = [_cos(t[i], t0[j]) for j in range(k)]
        total += -math.log(_softmax(sims)[i])
    return total / k


def majority(labels, num_classes):
    counts = [0] * num_classes
    for v in labels:
        if v != IGNORE:
            counts[v] += 1
    if sum(counts) == 0:
        return IGNORE
    best = 0
    for c in range(num_classes):
        if counts[c] > counts[best]:
            best = c
    return best


def reg_vision_language(v, t, gt, tau):
    """v: B x C x h x w nested lists; t: B x K x C; gt: B x H x W."""
    total, count = 0.0, 0
    b, c = len(v), len(v[0])
    h, w = len(v[0][0]), len(v[0][0][0])
    H, W = len(gt[0]), len(gt[0][0])
    ph, pw = H // h, W // w
    k = len(t[0])
    for n in range(b):
        for i in range(h):
            for j in range(w):
                patch = [gt[n][y][x] for y in range(i * ph, (i + 1) * ph) for x in range(j * pw, (j + 1) * pw)]
                label = majority(patch, k)
                if label == IGNORE:
                    continue
                feat = [v[n][ch][i][j] for ch in range(c)]
                logits = [_cos(feat, t[n][q]) / tau for q in range(k)]
                total += -math.log(_softmax(logits)[label])
                count += 1
    return total / count if count else 0.0


def confusion(pred, gt, k):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(pred, gt):
        if g != IGNORE:
            cm[g][p] += 1
    return cm


def miou(pred, gt, k):
    """mIoU straight from per-class pixel sets; None if every class has an empty union."""
    ious = []
    for c in range(k):
        inter = sum(1 for p, g in zip(pred, gt) if g != IGNORE and p == c and g == c)
        union = sum(1 for p, g in zip(pred, gt) if g != IGNORE and (p == c or g == c))
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious) if ious else None


def pr_enumeration(scores, gt):
    """Exhaustive threshold sweep: (thresholds, precision, recall, AP).

    For every candidate threshold (each distinct score) count TP/FP by brute
    force; AP integrates the running-max-from-the-right precision over recall.
    """
    thresholds = sorted(set(scores), reverse=True)
    n_pos = sum(1 for g in gt if g)
    prec, rec = [], []
    for thr in thresholds:
        tp = sum(1 for s, g in zip(scores, gt) if s >= thr and g)
        fp = sum(1 for s, g in zip(scores, gt) if s >= thr and not g)
        prec.append(tp / (tp + fp))
        rec.append(tp / n_pos if n_pos else 0.0)
    if not n_pos:
        return thresholds, prec, rec, None
    ap, last_r = 0.0, 0.0
    for i in range(len(thresholds)):
        best = max(prec[i:])
        ap += (rec[i] - last_r) * best
        last_r = rec[i]
    return thresholds, prec, rec, ap


def all_labelings(n, k):
    return itertools.product(range(k), repeat=n)


def central_difference(f, x, index, step=1e-5):
    """(f(x + h e_i) - f(x - h e_i)) / 2h for one flat index of tensor ``x`` (modified in place, restored)."""
    flat = x.data.view(-1)
    old = flat[index].item()
    flat[index] = old + step
    hi = float(f())
    flat[index] = old - step
    lo = float(f())
    flat[index] = old
    return (hi - lo) / (2 * step)


def directional_difference(f, x, direction, step=1e-5):
    """Central difference of ``f`` along ``direction`` for tensor ``x`` (restored afterwards)."""
    old = x.data.clone()
    x.data.add_(step * direction)
    hi = float(f())
    x.data.copy_(old - step * direction)
    lo = float(f())
    x.data.copy_(old)
    return (hi - lo) / (2 * step)


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor): a pure relative error except where both are tiny."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tensor_relative_error(analytic, numeric, floor=1e-6):
    """max_i |a_i - n_i| / max(max|a|, max|n|, floor): error relative to the gradient's scale."""
    diff = max(abs(a - n) for a, n in zip(analytic, numeric))
    scale = max(max(abs(a) for a in analytic), max(abs(n) for n in numeric), floor)
    return diff / scale
