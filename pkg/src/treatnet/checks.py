"""Self-checks run by ``treatnet gradcheck``: finite-difference gradients and model invariants."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .model import Batch, FusionConfig, FusionModel, TabularHead, pad_studies
from .tensor import Tensor, grad_check

GRAD_TOL = 1e-5


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-valued closure per differentiable op, on random shapes up to 16."""
    n, m, k = (int(v) for v in rng.integers(2, 17, size=3))
    a, b = _rand(rng, n, k), _rand(rng, k, m)
    v1, v2 = _rand(rng, n), _rand(rng, n)
    g, be = _rand(rng, k), _rand(rng, k)
    w_nm = Tensor(rng.normal(size=(n, m)))
    w_nk = Tensor(rng.normal(size=(n, k)))
    w_cat = Tensor(rng.normal(size=(n, k + m)))
    y = (rng.random(n) < 0.5).astype(float)
    mask = rng.random((n, k)) < 0.3
    mask[:, 0] = False
    idx = rng.integers(0, n, size=4)
    w_take = Tensor(rng.normal(size=(4, k)))
    # keep relu inputs away from the kink where the derivative is undefined
    a_relu = Tensor(np.where(np.abs(a.data) < 1e-3, 0.1, a.data), requires_grad=True)
    return {
        "matmul": (lambda: T.sum_all(T.mul(T.matmul(a, b), w_nm)), [a, b]),
        "add": (lambda: T.sum_all(T.mul(T.add(a, g), w_nk)), [a, g]),
        "mul": (lambda: T.sum_all(T.mul(T.mul(a, g), w_nk)), [a, g]),
        "scale": (lambda: T.sum_all(T.mul(T.scale(a, -1.7), w_nk)), [a]),
        "relu": (lambda: T.sum_all(T.mul(T.relu(a_relu), w_nk)), [a_relu]),
        "sigmoid": (lambda: T.sum_all(T.mul(T.sigmoid(a), w_nk)), [a]),
        "tanh": (lambda: T.sum_all(T.mul(T.tanh(a), w_nk)), [a]),
        "softmax": (lambda: T.sum_all(T.mul(T.softmax_rows(T.masked_fill(a, mask, -np.inf)), w_nk)), [a]),
        "layer_norm": (lambda: T.sum_all(T.mul(T.layer_norm(a, g, be), w_nk)), [a, g, be]),
        "standardize": (lambda: T.sum_all(T.mul(T.standardize(v1)[0], v2.detach())), [v1]),
        "mean": (lambda: T.sum_all(T.mul(T.mean(a, axis=0), g.detach())), [a]),
        "concat": (lambda: T.sum_all(T.mul(T.concat_last_dim([a, T.matmul(a, b)]), w_cat)), [a, b]),
        "transpose": (lambda: T.sum_all(T.matmul(T.transpose(a), w_nm)), [a]),
        "reshape": (lambda: T.sum_all(T.mul(T.reshape(a, (k, n)), T.transpose(w_nk))), [a]),
        "take_rows": (lambda: T.sum_all(T.mul(T.take_rows(a, idx), w_take)), [a]),
        "bce": (lambda: T.bce_with_logits(v1, y), [v1]),
    }


def full_model_case(kind: str = "treatnet", logit_norm: str = "batch_standardize", seed: int = 0,
                    d: int = 8, heads: int = 2, L: int = 3, n: int = 4, tab_dim: int = 6,
                    norm_affine: bool = False):
    """The whole forward pass and loss on a tiny model; returns (closure, trainable tensors)."""
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(d=d, heads=heads, tab_embed_dim=tab_dim, tab_hidden_dim=5, logit_norm=logit_norm,
                       norm_affine=norm_affine)
    f_tab = None
    if kind == "treatnet":
        f_tab = TabularHead(tab_dim, 5, seed=seed + 1)
        f_tab.fitted = True
    model = FusionModel(cfg, kind, seed=seed, f_tab=f_tab)
    for t in model.params.values():
        # move gamma/beta off their initial values so the check is not degenerate
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    lengths = [L] + [int(v) for v in rng.integers(1, L + 1, size=n - 1)]
    videos, valid = pad_studies([rng.normal(size=(k, d)) for k in lengths], L)
    y = np.array([0.0, 1.0] * (n // 2) + [1.0] * (n % 2))
    batch = Batch(rng.normal(size=(n, tab_dim)), videos, valid, y)
    return (lambda: model.loss(batch)), list(model.trainable().values())


def gradient_suite(seed: int = 0, trials: int = 3) -> dict[str, float]:
    """Worst relative gradient error for every op and for the full model variants."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for name, (f, inputs) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, inputs))
    for kind in ("treatnet", "cross_attention_only", "video_only"):
        f, inputs = full_model_case(kind, seed=seed)
        worst[f"model:{kind}"] = grad_check(f, inputs)
    f, inputs = full_model_case("treatnet", seed=seed, norm_affine=True)
    worst["model:treatnet:affine"] = grad_check(f, inputs)
    f, inputs = full_model_case("treatnet", "vector2_layernorm", seed=seed, norm_affine=True)
    worst["model:treatnet:vector2_layernorm"] = grad_check(f, inputs)
    return worst


def late_fuse_invariance(seed: int = 0, trials: int = 50, n: int = 32) -> float:
    """Largest change of yhat when one logit stream is replaced by a positive affine image."""
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(d=8, heads=2, tab_embed_dim=6, tab_hidden_dim=5)
    head = TabularHead(6, 5)
    head.fitted = True
    m = FusionModel(cfg, "treatnet", f_tab=head)
    worst = 0.0
    for _ in range(trials):
        zt, zf = rng.normal(size=n) * rng.uniform(0.1, 5), rng.normal(size=n)
        a, b = math.exp(rng.uniform(-3, 3)), rng.normal() * 10
        base = T._sigmoid(m.late_fuse(Tensor(zt), Tensor(zf), True, update_stats=False).data)
        for pair in ((a * zt + b, zf), (zt, a * zf + b)):
            moved = T._sigmoid(m.late_fuse(Tensor(pair[0]), Tensor(pair[1]), True, update_stats=False).data)
            worst = max(worst, float(np.max(np.abs(moved - base))))
    return worst


def permutation_invariance(seed: int = 0, trials: int = 100) -> int:
    """Number of (study, permutation) pairs whose attention output is not bit-identical."""
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(d=8, heads=2, tab_embed_dim=6)
    m = FusionModel(cfg, "cross_attention_only", seed=seed)
    failures = 0
    for _ in range(trials):
        rows = rng.normal(size=(int(rng.integers(1, 9)), cfg.d))
        q = m.project_tab(Tensor(rng.normal(size=(1, 6))))
        a = m.cross_attend(q, *pad_studies([rows])).data
        b = m.cross_attend(q, *pad_studies([rows[rng.permutation(len(rows))]])).data
        failures += a.tobytes() != b.tobytes()
    return failures


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    """(check name, passed, detail) rows."""
    rows = []
    for name, err in gradient_suite(seed).items():
        rows.append((f"grad:{name}", bool(err < GRAD_TOL), f"max_rel_err={err:.3e}"))
    dev = late_fuse_invariance(seed)
    rows.append(("late_fuse_affine_invariance", dev < 1e-9, f"max_dev={dev:.3e}"))
    bad = permutation_invariance(seed)
    rows.append(("attention_permutation_invariance", bad == 0, f"mismatches={bad}"))
    return rows
