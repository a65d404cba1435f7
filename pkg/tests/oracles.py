"""Independent reference implementations shared by the unit and acceptance tests."""
import math

import numpy as np

from treatnet.metrics import ScoredSet


def single_head_oracle(q_vec, rows, Wq, Wk, Wv, Wo):
    """Textbook scaled dot-product attention for one query, written with plain loops."""
    q = [sum(q_vec[a] * Wq[a, j] for a in range(len(q_vec))) for j in range(Wq.shape[1])]
    keys = [[sum(r[a] * Wk[a, j] for a in range(len(r))) for j in range(Wk.shape[1])] for r in rows]
    vals = [[sum(r[a] * Wv[a, j] for a in range(len(r))) for j in range(Wv.shape[1])] for r in rows]
    dh = Wq.shape[1]
    logits = [sum(qi * ki for qi, ki in zip(q, k)) / math.sqrt(dh) for k in keys]
    top = max(logits)
    ex = [math.exp(s - top) for s in logits]
    weights = [x / sum(ex) for x in ex]
    ctx = [sum(w * v[j] for w, v in zip(weights, vals)) for j in range(dh)]
    return np.array([sum(ctx[a] * Wo[a, j] for a in range(dh)) for j in range(Wo.shape[1])])



def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brute_confusion(scores, labels, thr):
    tp = fp = fn = tn = 0
    for s, y in zip(scores, labels):
        pred = s >= thr
        if pred and y:
            tp += 1
        elif pred:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_bacc(scores, labels, thr):
    tp, fp, fn, tn = brute_confusion(scores, labels, thr)
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))


def sweep_sens_at_spec(scores, labels, target):
    best = -1.0
    for thr in sorted(set(scores)) + [math.inf]:
        tp, fp, fn, tn = brute_confusion(scores, labels, thr)
        spec = tn / (tn + fp)
        if spec >= target - 1e-12:
            best = max(best, tp / (tp + fn))
    return best


def random_set(rng, n_max=200):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    if rng.random() < 0.5:
        scores = rng.integers(0, 8, size=n).astype(float)  # heavy ties
    else:
        scores = rng.normal(size=n)
    return ScoredSet(scores, labels)
