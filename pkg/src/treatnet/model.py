"""Tabular-guided cross-attention fusion model, its baselines, and checkpoint IO.

Row-vector convention throughout: activations are ``(batch, width)`` and a
linear layer is ``x @ W + b`` with ``W`` of shape ``(in, out)``. The per-head
query/key/value matrices therefore have shape ``(d, d_h)`` and the output
projection ``(d, d)``.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .embeddings import TabularSurrogateEncoder
from .tensor import Tensor

KINDS = ("treatnet", "cross_attention_only", "video_only")
LOGIT_NORMS = ("batch_standardize", "vector2_layernorm")


class LifecycleError(RuntimeError):
    pass


class EmptyStudyError(ValueError):
    pass


@dataclass
class FusionConfig:
    d: int = 512
    tab_embed_dim: int = 192
    heads: int = 4
    ffn_hidden_dim: int | None = None
    ln_eps: float = 1e-5
    logit_norm: str = "batch_standardize"
    norm_momentum: float = 0.1
    norm_affine: bool = False
    tab_hidden_dim: int = 64
    feature_width: int = 37
    encoder_seed: int = 1234

    def __post_init__(self):
        if self.ffn_hidden_dim is None:
            self.ffn_hidden_dim = self.d
        for name in ("d", "tab_embed_dim", "heads", "ffn_hidden_dim", "tab_hidden_dim", "feature_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"FusionConfig.{name} must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.logit_norm not in LOGIT_NORMS:
            raise ValueError(f"logit_norm must be one of {LOGIT_NORMS}, got {self.logit_norm!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def _init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


# ------------------------------------------------------------------ inputs


@dataclass
class Batch:
    """Model inputs for ``n`` patients.

    ``htab`` holds the frozen tabular embeddings; ``videos`` is zero-padded to a
    common length with ``valid`` marking real rows. Rows of each study are
    stored in canonical (lexicographic) order, which makes every downstream
    reduction over videos independent of the order the study arrived in.
    """

    htab: np.ndarray
    videos: np.ndarray | None
    valid: np.ndarray | None
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return self.htab.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(
            self.htab[idx],
            None if self.videos is None else self.videos[idx],
            None if self.valid is None else self.valid[idx],
            None if self.y is None else self.y[idx],
        )


def canonical_order(study: np.ndarray) -> np.ndarray:
    study = np.asarray(study, dtype=np.float64)
    return study[np.lexsort(study.T[::-1])]


def pad_studies(studies, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if not studies:
        raise EmptyStudyError("no studies to pad")
    lengths = [len(s) for s in studies]
    if min(lengths) < 1:
        raise EmptyStudyError("study with zero videos")
    width = np.asarray(studies[0]).shape[1]
    L = max(lengths) if max_len is None else max_len
    if max(lengths) > L:
        raise ValueError(f"study of length {max(lengths)} exceeds max_len {L}")
    out = np.zeros((len(studies), L, width))
    valid = np.zeros((len(studies), L), dtype=bool)
    for i, s in enumerate(studies):
        out[i, : len(s)] = canonical_order(s)
        valid[i, : len(s)] = True
    return out, valid


# ------------------------------------------------------------ tabular head


class TabularHead:
    """MLP ``embed -> hidden -> 1`` with relu (``f_tab``)."""

    def __init__(self, in_dim: int = 192, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            w1=Tensor(_init(rng, in_dim, (in_dim, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(_init(rng, hidden, (hidden, 1)), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )
        self.fitted = False

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def __call__(self, htab: Tensor) -> Tensor:
        p = self.params
        hidden = T.relu(_linear(htab, p["w1"], p["b1"]))
        return T.reshape(_linear(hidden, p["w2"], p["b2"]), (htab.shape[0],))


class TabularModel:
    """The tabular-only classifier: frozen encoder followed by ``f_tab``."""

    kind = "tabular_only"

    def __init__(self, encoder: TabularSurrogateEncoder, head: TabularHead):
        self.encoder = encoder
        self.head = head

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((f"f_tab.{k}", v) for k, v in self.head.params.items())

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.parameters().items() if v.requires_grad)

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def logits(self, batch: Batch) -> Tensor:
        return self.head(Tensor(batch.htab))

    def loss(self, batch: Batch, weights=None) -> Tensor:
        return T.bce_with_logits(self.logits(batch), batch.y, weights)

    def predict(self, batch: Batch, chunk: int = 512) -> np.ndarray:
        out = [T._sigmoid(self.logits(batch.take(slice(i, i + chunk))).data)
               for i in range(0, len(batch), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


# ------------------------------------------------------------ fusion model


class FusionModel:
    """Projection, tabular-query cross-attention, residual + LayerNorm + FFN, and output heads.

    ``kind`` selects the variant:

    * ``treatnet``: fused head plus the frozen tabular head, late-fused.
    * ``cross_attention_only``: the fused head alone.
    * ``video_only``: a learned query replaces the projected tabular embedding.
    """

    def __init__(self, cfg: FusionConfig, kind: str = "treatnet", seed: int = 0,
                 encoder: TabularSurrogateEncoder | None = None, f_tab: TabularHead | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        self.cfg = cfg
        self.kind = kind
        self.encoder = encoder
        self.f_tab = f_tab
        if kind == "treatnet" and f_tab is None:
            raise LifecycleError("treatnet needs a tabular head")
        if f_tab is not None:
            f_tab.freeze()

        d, dh, e = cfg.d, cfg.head_dim, cfg.tab_embed_dim
        rng = np.random.default_rng(seed)
        p: "OrderedDict[str, Tensor]" = OrderedDict()
        if kind == "video_only":
            p["query"] = Tensor(rng.normal(0.0, 1.0, size=d), requires_grad=True)
        else:
            p["proj.weight"] = Tensor(_init(rng, e, (e, d)), requires_grad=True)
            p["proj.bias"] = Tensor(np.zeros(d), requires_grad=True)
        for i in range(cfg.heads):
            p[f"attn.q{i}"] = Tensor(_init(rng, d, (d, dh)), requires_grad=True)
            p[f"attn.k{i}"] = Tensor(_init(rng, d, (d, dh)), requires_grad=True)
            p[f"attn.v{i}"] = Tensor(_init(rng, d, (d, dh)), requires_grad=True)
        p["attn.out"] = Tensor(_init(rng, d, (d, d)), requires_grad=True)
        p["ln.gamma"] = Tensor(np.ones(d), requires_grad=True)
        p["ln.beta"] = Tensor(np.zeros(d), requires_grad=True)
        hdim = cfg.ffn_hidden_dim
        p["ffn.w_a"] = Tensor(_init(rng, d, (d, hdim)), requires_grad=True)
        p["ffn.b_a"] = Tensor(np.zeros(hdim), requires_grad=True)
        p["ffn.w_b"] = Tensor(_init(rng, hdim, (hdim, d)), requires_grad=True)
        p["ffn.b_b"] = Tensor(np.zeros(d), requires_grad=True)
        p["head.w"] = Tensor(_init(rng, d, (d, 1)), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(1), requires_grad=True)
        if kind == "treatnet":
            width = 2 if cfg.logit_norm == "vector2_layernorm" else 1
            for stream in ("tab", "fused"):
                p[f"norm.{stream}.gamma"] = Tensor(np.ones(width), requires_grad=cfg.norm_affine)
                p[f"norm.{stream}.beta"] = Tensor(np.zeros(width), requires_grad=cfg.norm_affine)
        self.params = p
        self.running = {"tab_mean": 0.0, "tab_var": 1.0, "fused_mean": 0.0, "fused_var": 1.0}

    # parameters ------------------------------------------------------------

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.params)
        if self.f_tab is not None:
            out.update((f"f_tab.{k}", v) for k, v in self.f_tab.params.items())
        return out

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.parameters().items() if v.requires_grad)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        if self.kind == "treatnet" and self.cfg.logit_norm == "batch_standardize":
            out = {f"norm.running.{k}": np.array([v]) for k, v in self.running.items()}
        if self.encoder is not None:
            out["encoder.weight"] = self.encoder.weight
            out["encoder.bias"] = self.encoder.bias
        return out

    # graph pieces ----------------------------------------------------------

    def project_tab(self, htab: Tensor) -> Tensor:
        if htab.shape[-1] != self.cfg.tab_embed_dim:
            raise T.ShapeError(f"project_tab: expected width {self.cfg.tab_embed_dim}, got {htab.shape[-1]}")
        return _linear(htab, self.params["proj.weight"], self.params["proj.bias"])

    def cross_attend(self, h_tab: Tensor, videos, valid: np.ndarray | None = None,
                     return_weights: bool = False):
        """Multi-head attention with one query per patient over that patient's videos.

        ``h_tab``: ``(n, d)``; ``videos``: ``(n, L, d)``; ``valid``: ``(n, L)`` mask of real rows.
        """
        cfg = self.cfg
        videos = videos if isinstance(videos, Tensor) else Tensor(videos)
        n, L, d = videos.shape
        if L == 0:
            raise EmptyStudyError("cross_attend: study with zero videos")
        if h_tab.shape != (n, d):
            raise T.ShapeError(f"cross_attend: query {h_tab.shape} vs videos {videos.shape}")
        pad = None if valid is None else ~np.asarray(valid, dtype=bool)[:, None, :]
        if valid is not None and not np.asarray(valid).any(axis=1).all():
            raise EmptyStudyError("cross_attend: study with zero videos")
        q = T.reshape(h_tab, (n, 1, d))
        scale = 1.0 / math.sqrt(cfg.head_dim)
        heads, weights = [], []
        for i in range(cfg.heads):
            qi = T.matmul(q, self.params[f"attn.q{i}"])
            ki = T.matmul(videos, self.params[f"attn.k{i}"])
            vi = T.matmul(videos, self.params[f"attn.v{i}"])
            scores = T.scale(T.matmul(qi, T.transpose(ki)), scale)
            if pad is not None:
                scores = T.masked_fill(scores, pad, -np.inf)
            a = T.softmax_rows(scores)
            weights.append(a.data[:, 0, :])
            heads.append(T.matmul(a, vi))
        h_att = T.matmul(T.concat_last_dim(heads), self.params["attn.out"])
        h_att = T.reshape(h_att, (n, d))
        return (h_att, np.stack(weights, axis=1)) if return_weights else h_att

    def fuse(self, h_att: Tensor, h_tab: Tensor) -> Tensor:
        p = self.params
        x = T.layer_norm(T.add(h_att, h_tab), p["ln.gamma"], p["ln.beta"], self.cfg.ln_eps)
        hidden = T.relu(_linear(x, p["ffn.w_a"], p["ffn.b_a"]))
        return _linear(hidden, p["ffn.w_b"], p["ffn.b_b"])

    def fused_logit(self, h_fused: Tensor) -> Tensor:
        z = _linear(h_fused, self.params["head.w"], self.params["head.b"])
        return T.reshape(z, (h_fused.shape[0],))

    def heads(self, htab: Tensor, h_fused: Tensor) -> tuple[Tensor, Tensor]:
        if self.f_tab is None or not self.f_tab.fitted:
            raise LifecycleError("tabular head has not been trained")
        return self.f_tab(htab), self.fused_logit(h_fused)

    def late_fuse(self, z_tab: Tensor, z_fused: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        """Normalize each logit stream and average them; returns ``z_final`` (apply sigmoid for yhat)."""
        if self.cfg.logit_norm == "vector2_layernorm":
            return T.scale(T.add(self._pair_norm(z_tab, "tab"), self._pair_norm(z_fused, "fused")), 0.5)
        eps = self.cfg.ln_eps
        if training:
            if z_tab.shape[0] < 2:
                raise ValueError("batch standardization needs at least 2 samples in training mode")
            zt, mt, vt = T.standardize(z_tab, eps)
            zf, mf, vf = T.standardize(z_fused, eps)
            if update_stats:
                m = self.cfg.norm_momentum
                r = self.running
                r["tab_mean"] = (1 - m) * r["tab_mean"] + m * mt
                r["tab_var"] = (1 - m) * r["tab_var"] + m * vt
                r["fused_mean"] = (1 - m) * r["fused_mean"] + m * mf
                r["fused_var"] = (1 - m) * r["fused_var"] + m * vf
        else:
            r = self.running
            zt = T.scale(T.add(z_tab, Tensor(-r["tab_mean"])), 1.0 / max(math.sqrt(r["tab_var"]), eps))
            zf = T.scale(T.add(z_fused, Tensor(-r["fused_mean"])), 1.0 / max(math.sqrt(r["fused_var"]), eps))
        zt = T.add(T.mul(zt, self.params["norm.tab.gamma"]), self.params["norm.tab.beta"])
        zf = T.add(T.mul(zf, self.params["norm.fused.gamma"]), self.params["norm.fused.beta"])
        return T.scale(T.add(zt, zf), 0.5)

    def _pair_norm(self, z: Tensor, stream: str) -> Tensor:
        # two-class logits (-z/2, z/2), LayerNorm over the class axis, back to a margin
        n = z.shape[0]
        pair = T.matmul(T.reshape(z, (n, 1)), Tensor([[-0.5, 0.5]]))
        normed = T.layer_norm(pair, self.params[f"norm.{stream}.gamma"],
                              self.params[f"norm.{stream}.beta"], self.cfg.ln_eps)
        return T.reshape(T.matmul(normed, Tensor([[-1.0], [1.0]])), (n,))

    # whole model -----------------------------------------------------------

    def logits(self, batch: Batch, training: bool = False, update_stats: bool = True) -> Tensor:
        if batch.videos is None:
            raise ValueError(f"{self.kind} needs video embeddings")
        n = len(batch)
        htab = Tensor(batch.htab)
        if self.kind == "video_only":
            h_q = T.add(Tensor(np.zeros((n, self.cfg.d))), self.params["query"])
        else:
            h_q = self.project_tab(htab)
        h_att = self.cross_attend(h_q, batch.videos, batch.valid)
        h_fused = self.fuse(h_att, h_q)
        if self.kind != "treatnet":
            return self.fused_logit(h_fused)
        z_tab, z_fused = self.heads(htab, h_fused)
        return self.late_fuse(z_tab, z_fused, training, update_stats)

    def loss(self, batch: Batch, weights=None) -> Tensor:
        return T.bce_with_logits(self.logits(batch, training=True), batch.y, weights)

    def predict(self, batch: Batch, chunk: int = 256) -> np.ndarray:
        out = [T._sigmoid(self.logits(batch.take(slice(i, i + chunk)), training=False).data)
               for i in range(0, len(batch), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


def baseline_video_only(model: FusionModel, batch: Batch) -> Tensor:
    assert model.kind == "video_only"
    return model.logits(batch)


def baseline_cross_attention_only(model: FusionModel, batch: Batch) -> Tensor:
    assert model.kind == "cross_attention_only"
    return model.logits(batch)


def baseline_tabular_only(model: TabularModel, batch: Batch) -> Tensor:
    return model.logits(batch)


# ------------------------------------------------------------- checkpoints

MANIFEST = "manifest.json"
BLOB = "tensors.f32"


def quantize_(model) -> None:
    """Round every parameter and buffer to the nearest float32, in place."""
    for t in model.parameters().values():
        t.data = t.data.astype(np.float32).astype(np.float64)
    if isinstance(model, FusionModel):
        model.running = {k: float(np.float32(v)) for k, v in model.running.items()}


def snapshot(model, quantize: bool = True) -> dict[str, np.ndarray]:
    """Copy of all parameters (and running statistics), float32-rounded by default."""
    def q(a):
        return a.astype(np.float32).astype(np.float64) if quantize else a.copy()
    out = {k: q(v.data) for k, v in model.parameters().items()}
    if isinstance(model, FusionModel):
        out["__running__"] = q(np.array([model.running[k] for k in sorted(model.running)]))
    return out


def restore(model, snap: dict[str, np.ndarray]) -> None:
    for k, v in model.parameters().items():
        v.data = snap[k].copy()
    if isinstance(model, FusionModel):
        for k, v in zip(sorted(model.running), snap["__running__"]):
            model.running[k] = float(v)


def _tensor_table(model) -> "OrderedDict[str, np.ndarray]":
    table = OrderedDict()
    if model.encoder is not None:
        table["encoder.weight"] = model.encoder.weight
        table["encoder.bias"] = model.encoder.bias
    for k, v in model.parameters().items():
        table[k] = v.data
    for k, v in model.buffers().items():
        table.setdefault(k, v)
    return table


def save_checkpoint(model, path: str | Path, meta: dict | None = None) -> None:
    """Write ``manifest.json`` plus a single little-endian float32 blob into directory ``path``.

    Values are stored as float32; call :func:`quantize_` first if the in-memory
    model must match the reloaded one bit for bit.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    directory = OrderedDict()
    chunks = []
    offset = 0
    for name, arr in _tensor_table(model).items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {"shape": list(np.shape(arr)), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "treatnet-ckpt-1",
        "kind": model.kind,
        "config": asdict(model.cfg) if isinstance(model, FusionModel) else {
            "tab_embed_dim": model.head.params["w1"].shape[0],
            "tab_hidden_dim": model.head.params["w1"].shape[1],
        },
        "tensors": directory,
        "blob": BLOB,
        "meta": meta or {},
    }
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    blob = (path / manifest["blob"]).read_bytes()
    arrays = {}
    for name, e in manifest["tensors"].items():
        if e["offset"] + e["length"] > len(blob):
            raise ValueError(f"checkpoint blob truncated at tensor {name!r}")
        a = np.frombuffer(blob, dtype="<f4", count=e["length"] // 4, offset=e["offset"])
        arrays[name] = a.astype(np.float64).reshape(e["shape"])
    return manifest, arrays


def load_checkpoint(path: str | Path):
    manifest, arrays = read_checkpoint(path)
    encoder = None
    if "encoder.weight" in arrays:
        encoder = TabularSurrogateEncoder.from_arrays(arrays["encoder.weight"], arrays["encoder.bias"])

    def tab_head() -> TabularHead | None:
        if "f_tab.w1" not in arrays:
            return None
        w1 = arrays["f_tab.w1"]
        head = TabularHead(w1.shape[0], w1.shape[1])
        for k in head.params:
            head.params[k].data = arrays[f"f_tab.{k}"].copy()
        head.fitted = True
        return head

    kind = manifest["kind"]
    if kind == "tabular_only":
        model = TabularModel(encoder, tab_head())
        model.head.freeze()
        return model, manifest
    cfg_fields = {f.name for f in fields(FusionConfig)}
    cfg = FusionConfig(**{k: v for k, v in manifest["config"].items() if k in cfg_fields})
    model = FusionModel(cfg, kind, encoder=encoder, f_tab=tab_head())
    for k, v in model.params.items():
        v.data = arrays[k].copy()
    for k in model.running:
        key = f"norm.running.{k}"
        if key in arrays:
            model.running[k] = float(arrays[key][0])
    return model, manifest
