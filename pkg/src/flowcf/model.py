"""The traffic-flow predictor: per block, temporal self-attention feeds a
graph-convolution branch and a geographic attention branch fused by a
sigmoid gate, followed by semantic attention; a linear head maps back to
flow channels.

Spatial perturbation masks multiply the graph-convolution adjacency and
the surviving attention logits of both spatial attention blocks; the
temporal mask rescales whole input time slices. With no masks (or
all-ones masks) the model is the plain predictor.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, matmul, mse, softmax_rows
from .data import DatasetBundle, FlowWindow
from .graph import GraphSpec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "flowcf-checkpoint-v1"
ALL_MASK_TARGETS = ("gcn", "geo", "sem")


class NumericalError(RuntimeError):
    """A non-finite value appeared where the math guarantees finite ones."""


@dataclass
class ModelConfig:
    hidden: int = 16
    blocks: int = 2
    heads: int = 1
    channels: int = 1
    window: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    log_every: int = 10


class Adam:
    """Adam with bias correction; lr=0 leaves parameters untouched."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class GraphTransformer:
    """Trainable predictor Phi(X; A) -> next-window forecast."""

    def __init__(self, n_nodes: int, config: ModelConfig):
        self.n_nodes = n_nodes
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        d, c, t = config.hidden, config.channels, config.window

        def param(name: str, shape, scale: float) -> None:
            self.params[name] = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        param("embed_w", (c, d), 1.0 / np.sqrt(c))
        self.params["embed_b"] = Tensor(np.zeros((d,)), requires_grad=True)
        param("pos", (t, 1, d), 0.02)
        s = 1.0 / np.sqrt(d)
        for b in range(config.blocks):
            for kind in ("t", "g", "s"):
                param(f"b{b}.{kind}_q", (d, d), s)
                param(f"b{b}.{kind}_k", (d, d), s)
                param(f"b{b}.{kind}_v", (d, d), s)
            param(f"b{b}.w_gcn", (d, d), s)
            param(f"b{b}.gate_s_w", (d, d), s)
            param(f"b{b}.gate_g_w", (d, d), s)
            self.params[f"b{b}.gate_b"] = Tensor(np.zeros((d,)), requires_grad=True)
        param("head_w", (d, c), s)
        self.params["head_b"] = Tensor(np.zeros((c,)), requires_grad=True)

    # ---- parameter plumbing -------------------------------------------

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = state[k].copy()

    def param_bytes(self) -> bytes:
        digest = hashlib.sha256()
        for k in sorted(self.params):
            digest.update(k.encode())
            digest.update(self.params[k].data.tobytes())
        return digest.digest()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def assert_finite(self) -> None:
        for k, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise NumericalError(f"parameter {k} went non-finite")

    # ---- forward pieces -------------------------------------------------

    def _check(self, name: str, t: Tensor) -> Tensor:
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite values after {name}")
        return t

    def _heads_split(self, t: Tensor) -> Tensor:
        # (..., S, d) -> (..., h, S, dh)
        h = self.config.heads
        if h == 1:
            return t
        *lead, s_len, d = t.shape
        t = t.reshape((*lead, s_len, h, d // h))
        axes = list(range(t.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return t.transpose(axes)

    def _heads_merge(self, t: Tensor) -> Tensor:
        h = self.config.heads
        if h == 1:
            return t
        axes = list(range(t.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        t = t.transpose(axes)
        *lead, s_len, _h, dh = t.shape
        return t.reshape((*lead, s_len, h * dh))

    def _attend(self, h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                logit_scale: Tensor | None = None, keep: np.ndarray | None = None,
                collect: list | None = None) -> Tensor:
        """Self-attention over the second-to-last axis of ``h``.

        ``logit_scale`` multiplies the surviving logits elementwise (this is
        where the spatial mask and any edge re-weighting act); ``keep``
        restricts attention to allowed pairs. A removed-but-allowed pair has
        its logit scaled to 0, which still contributes exp(0) to the row:
        the masking is multiplicative on logits, not additive -inf.
        """
        q = self._heads_split(matmul(h, wq))
        k = self._heads_split(matmul(h, wk))
        v = self._heads_split(matmul(h, wv))
        dh = self.config.hidden // self.config.heads
        logits = matmul(q, k.transpose(tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2))) * (1.0 / np.sqrt(dh))
        if logit_scale is not None:
            logits = logits * logit_scale
        att = softmax_rows(logits, keep=keep)
        if collect is not None:
            collect.append(att.data.copy())
        return self._heads_merge(matmul(att, v))

    def _temporal(self, h: Tensor, b: int, collect=None) -> Tensor:
        # (B, T, N, d) -> attention over T per node
        perm = (0, 2, 1, 3)
        ht = h.transpose(perm)
        out = self._attend(ht, self.params[f"b{b}.t_q"], self.params[f"b{b}.t_k"], self.params[f"b{b}.t_v"],
                           collect=collect)
        return out.transpose(perm)

    def _spatial_attention(self, h: Tensor, b: int, kind: str, adjacency: np.ndarray,
                           mask_s: Tensor | None, collect=None) -> Tensor:
        keep = adjacency != 0
        scale = Tensor(adjacency * 1.0)
        logit_scale = scale if mask_s is None else mask_s * scale
        # neutralize the scale on non-kept entries so softmax gating decides
        logit_scale = logit_scale + Tensor((~keep).astype(np.float64))
        return self._attend(h, self.params[f"b{b}.{kind}_q"], self.params[f"b{b}.{kind}_k"],
                            self.params[f"b{b}.{kind}_v"], logit_scale=logit_scale, keep=keep,
                            collect=collect)

    def laplacian(self, graph: GraphSpec, mask_s: Tensor | None = None) -> Tensor:
        """I - D^{-1/2} (M * A_gcn) D^{-1/2}; D is the degree matrix of the
        unmasked adjacency, and isolated sensors get degree 1."""
        d_inv_sqrt = 1.0 / np.sqrt(graph.degrees())
        a = Tensor(graph.a_gcn)
        if mask_s is not None:
            a = mask_s * a
        scaled = a * Tensor(d_inv_sqrt[:, None]) * Tensor(d_inv_sqrt[None, :])
        return Tensor(np.eye(graph.n_nodes)) - scaled

    def _gcn(self, h: Tensor, b: int, lap: Tensor) -> Tensor:
        return matmul(matmul(lap, h), self.params[f"b{b}.w_gcn"])

    def _gate_fuse(self, t1: Tensor, t2: Tensor, b: int) -> Tensor:
        g = (matmul(t1, self.params[f"b{b}.gate_s_w"]) + matmul(t2, self.params[f"b{b}.gate_g_w"])
             + self.params[f"b{b}.gate_b"]).sigmoid()
        return g * t1 + (1.0 - g) * t2

    def forward(self, graph: GraphSpec, x, mask_s: Tensor | None = None, mask_f: Tensor | None = None,
                mask_targets: tuple[str, ...] = ALL_MASK_TARGETS,
                collect_attention: dict | None = None) -> Tensor:
        """Predict the next window. ``x`` is (T, N, C) or batched (B, T, N, C);
        the output matches the input rank."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        single = xt.ndim == 3
        if single:
            xt = xt.reshape((1,) + xt.shape)
        if xt.ndim != 4:
            raise ValueError(f"input must be (T,N,C) or (B,T,N,C), got {xt.shape}")

        if mask_f is not None:
            xt = mask_f * xt

        m_gcn = mask_s if mask_s is not None and "gcn" in mask_targets else None
        m_geo = mask_s if mask_s is not None and "geo" in mask_targets else None
        m_sem = mask_s if mask_s is not None and "sem" in mask_targets else None

        h = self._check("embed", matmul(xt, self.params["embed_w"]) + self.params["embed_b"] + self.params["pos"])
        lap = self.laplacian(graph, m_gcn)
        for b in range(self.config.blocks):
            coll_t = self._bucket(collect_attention, f"b{b}.temporal")
            coll_g = self._bucket(collect_attention, f"b{b}.geo")
            coll_s = self._bucket(collect_attention, f"b{b}.sem")
            h = self._check(f"b{b}.temporal", self._temporal(h, b, collect=coll_t))
            t1 = self._check(f"b{b}.geo_attention", self._spatial_attention(h, b, "g", graph.a_geo, m_geo, collect=coll_g))
            t2 = self._check(f"b{b}.gcn", self._gcn(h, b, lap))
            h = self._check(f"b{b}.gate", self._gate_fuse(t1, t2, b))
            h = self._check(f"b{b}.sem_attention", self._spatial_attention(h, b, "s", graph.a_sem, m_sem, collect=coll_s))
        y = self._check("head", matmul(h, self.params["head_w"]) + self.params["head_b"])
        return y.reshape(y.shape[1:]) if single else y

    @staticmethod
    def _bucket(collect: dict | None, key: str) -> list | None:
        if collect is None:
            return None
        return collect.setdefault(key, [])


# ---- inference and training -------------------------------------------------


def stack_windows(windows: list[FlowWindow]) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([w.x for w in windows])
    ys = np.stack([w.y for w in windows])
    return xs, ys


def predict(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
            mask_s: Tensor | None = None, mask_f: Tensor | None = None,
            mask_targets: tuple[str, ...] = ALL_MASK_TARGETS,
            collect_attention: dict | None = None, batch_size: int = 64) -> np.ndarray:
    """Stacked (W, T, N, C) predictions without building a gradient graph."""
    outs = []
    for i in range(0, len(windows), batch_size):
        xs, _ = stack_windows(windows[i : i + batch_size])
        y = model.forward(graph, xs, mask_s=mask_s, mask_f=mask_f, mask_targets=mask_targets,
                          collect_attention=collect_attention)
        outs.append(y.data)
    return np.concatenate(outs, axis=0)


@dataclass
class TrainResult:
    model: GraphTransformer
    history: list[dict]
    best_val_mse: float
    best_epoch: int


def _val_mse(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow]) -> float:
    preds = predict(model, graph, windows)
    _, ys = stack_windows(windows)
    return float(np.mean((preds - ys) ** 2))


def train(model: GraphTransformer, bundle: DatasetBundle, config: TrainConfig) -> TrainResult:
    """MSE training with Adam; returns the parameters that minimized
    validation MSE. Aborts with seed and step index if the loss diverges."""
    rng = np.random.default_rng(config.seed)
    graph = bundle.graph
    opt = Adam(model.params, lr=config.lr)
    history: list[dict] = []
    best_state = model.state_copy()
    best_val = _val_mse(model, graph, bundle.val)
    best_epoch = -1
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(bundle.train)) if config.shuffle else np.arange(len(bundle.train))
        epoch_loss = 0.0
        n_batches = 0
        for i in range(0, len(order), config.batch_size):
            batch = [bundle.train[j] for j in order[i : i + config.batch_size]]
            xs, ys = stack_windows(batch)
            pred = model.forward(graph, xs)
            loss = mse(pred, Tensor(ys))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"training diverged (seed={config.seed}, step={step})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += value
            n_batches += 1
            step += 1
        model.assert_finite()
        val = _val_mse(model, graph, bundle.val)
        history.append({"epoch": epoch, "train_mse": epoch_loss / max(n_batches, 1), "val_mse": val})
        if val < best_val:
            best_val = val
            best_state = model.state_copy()
            best_epoch = epoch
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d train %.5f val %.5f", epoch, epoch_loss / max(n_batches, 1), val)

    model.load_state(best_state)
    return TrainResult(model=model, history=history, best_val_mse=best_val, best_epoch=best_epoch)


# ---- checkpointing -----------------------------------------------------------


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()


def save_checkpoint(model: GraphTransformer, path: str, seed: int | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "n_nodes": model.n_nodes,
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "seed": model.config.seed if seed is None else seed,
        "params": {
            k: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for k, p in sorted(model.params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> GraphTransformer:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {payload.get('format')!r}")
    config = ModelConfig(**payload["config"])
    model = GraphTransformer(payload["n_nodes"], config)
    for k, spec in payload["params"].items():
        model.params[k].data = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
    return model


def clone_model(model: GraphTransformer) -> GraphTransformer:
    twin = GraphTransformer(model.n_nodes, copy.deepcopy(model.config))
    twin.load_state(model.state_copy())
    return twin
