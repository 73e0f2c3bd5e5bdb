"""Feature encoder and softmax bag classifier with exact gradients.

The encoder is an optional single affine+tanh map used when raw input
features need a trainable representation; for synthetic benchmarks it stays
disabled and features pass through unchanged. Training is plain momentum SGD
on the bag-level cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClassifierState:
    cls_w: np.ndarray               # (C, d)
    cls_b: np.ndarray               # (C,)
    enc_w: np.ndarray | None = None  # (d, d_in) when encoder enabled
    enc_b: np.ndarray | None = None
    lr_cls: float = 0.01
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_encoder(self) -> bool:
        return self.enc_w is not None

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {"cls_w": self.cls_w, "cls_b": self.cls_b}
        if self.has_encoder:
            out["enc_w"] = self.enc_w
            out["enc_b"] = self.enc_b
        return out


def init_classifier(
    d_in: int,
    num_classes: int,
    encoder_dim: int | None = None,
    lr_cls: float = 0.01,
    momentum: float = 0.9,
    rng: np.random.Generator | None = None,
) -> ClassifierState:
    rng = rng if rng is not None else np.random.default_rng(0)
    enc_w = enc_b = None
    d = d_in
    if encoder_dim is not None:
        enc_w = rng.normal(scale=1.0 / np.sqrt(d_in), size=(encoder_dim, d_in))
        enc_b = np.zeros(encoder_dim)
        d = encoder_dim
    cls_w = rng.normal(scale=0.01, size=(num_classes, d))
    cls_b = np.zeros(num_classes)
    return ClassifierState(cls_w, cls_b, enc_w, enc_b, lr_cls, momentum)


def encode(state: ClassifierState, raw: np.ndarray) -> np.ndarray:
    """Map raw features to model space: identity unless the encoder is on.

    Accepts a single vector or a (n, d_in) matrix of row vectors.
    """
    if not state.has_encoder:
        return raw
    d_in = state.enc_w.shape[1]
    if raw.shape[-1] != d_in:
        raise ValueError(f"expected input dim {d_in}, got {raw.shape[-1]}")
    return np.tanh(raw @ state.enc_w.T + state.enc_b)


def classify(state: ClassifierState, xbar: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a bag-level feature."""
    logits = state.cls_w @ xbar + state.cls_b
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def cls_loss_and_grads(
    state: ClassifierState,
    batch: list[tuple[np.ndarray, np.ndarray, int]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over bags plus exact parameter gradients.

    Each batch item is (instance feature matrix (n_b, d_in), instance
    weights (n_b,), label). Bag features are the weighted instance average
    after encoding; instance weights are constants here. Loss uses the
    log-sum-exp form so that confident logits cannot underflow.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    encoded = []
    xbars = np.empty((B, state.cls_w.shape[1]))
    for b, (feats, w, _) in enumerate(batch):
        H = encode(state, feats)
        encoded.append(H)
        xbars[b] = w @ H
    labels = np.array([y for _, _, y in batch])

    logits = xbars @ state.cls_w.T + state.cls_b  # (B, C)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(B), labels]))

    P = np.exp(logits - lse[:, None])
    G = P.copy()
    G[np.arange(B), labels] -= 1.0
    G /= B

    grads = {"cls_w": G.T @ xbars, "cls_b": G.sum(axis=0)}
    if state.has_encoder:
        g_xbar = G @ state.cls_w  # (B, d)
        g_enc_w = np.zeros_like(state.enc_w)
        g_enc_b = np.zeros_like(state.enc_b)
        for b, (feats, w, _) in enumerate(batch):
            H = encoded[b]
            g_pre = (w[:, None] * g_xbar[b][None, :]) * (1.0 - H * H)
            g_enc_w += g_pre.T @ feats
            g_enc_b += g_pre.sum(axis=0)
        grads["enc_w"] = g_enc_w
        grads["enc_b"] = g_enc_b
    return loss, grads


def sgd_step(state: ClassifierState, grads: dict[str, np.ndarray]) -> None:
    """Momentum SGD update: v <- mu*v + g, theta <- theta - lr*v."""
    params = state.params()
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(g)
        v = state.momentum * v + g
        state.velocity[name] = v
        params[name] -= state.lr_cls * v


def model_snapshot(state: ClassifierState) -> dict:
    doc = {
        "cls_w": [[float(v) for v in row] for row in state.cls_w],
        "cls_b": [float(v) for v in state.cls_b],
        "enc_w": None,
        "enc_b": None,
        "lr_cls": state.lr_cls,
        "momentum": state.momentum,
    }
    if state.has_encoder:
        doc["enc_w"] = [[float(v) for v in row] for row in state.enc_w]
        doc["enc_b"] = [float(v) for v in state.enc_b]
    return doc


def model_from_snapshot(doc: dict) -> ClassifierState:
    enc_w = np.asarray(doc["enc_w"], dtype=float) if doc.get("enc_w") else None
    enc_b = np.asarray(doc["enc_b"], dtype=float) if doc.get("enc_b") else None
    return ClassifierState(
        cls_w=np.asarray(doc["cls_w"], dtype=float),
        cls_b=np.asarray(doc["cls_b"], dtype=float),
        enc_w=enc_w,
        enc_b=enc_b,
        lr_cls=float(doc.get("lr_cls", 0.01)),
        momentum=float(doc.get("momentum", 0.9)),
    )
