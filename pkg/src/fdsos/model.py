"""Toy open-set detection head with manual backpropagation.

The main branch is a two-layer perceptron from the (centered) scene feature vector
to ``Q`` query embeddings and ``Q`` logistic box parameters; class logits
are dot products of query embeddings with a frozen text-embedding table.
A small denoising branch turns a (label, noised box) query plus the
shared scene hidden state into an embedding and a box refinement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .labelspace import VOCABULARY
from .losses import sigmoid

FORMAT_VERSION = 1
FROZEN = ("text", "feature_mean")
PRIOR_PROB = 0.01
_EPS_BOX = 1e-4


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _EPS_BOX, 1 - _EPS_BOX)
    return np.log(p) - np.log1p(-p)


@dataclass
class ToyDetector:
    num_queries: int
    embed_dim: int
    feature_dim: int
    params: dict[str, np.ndarray]

    @property
    def num_tokens(self) -> int:
        return self.params["text"].shape[0]

    @property
    def text(self) -> np.ndarray:
        return self.params["text"]

    @classmethod
    def init(
        cls,
        feature_dim: int,
        num_queries: int = 20,
        embed_dim: int = 32,
        hidden_dim: int = 128,
        dn_hidden_dim: int = 64,
        seed: int = 0,
        zero_output: bool = False,
        feature_mean: np.ndarray | None = None,
    ) -> "ToyDetector":
        rng = np.random.default_rng(seed)
        t = len(VOCABULARY)
        if embed_dim < t:
            raise ValueError("embed_dim must be at least the vocabulary size")
        q_, _ = np.linalg.qr(rng.standard_normal((embed_dim, t)))
        text = q_.T  # orthonormal rows
        # an embedding along the sum of text rows shifts every logit equally
        bias_dir = text.sum(0)
        prior = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
        out_dim = num_queries * (embed_dim + 4)
        p = {
            "text": text,
            "feature_mean": np.zeros(feature_dim) if feature_mean is None else np.asarray(feature_mean, float),
            "W1": rng.standard_normal((hidden_dim, feature_dim)) / np.sqrt(feature_dim),
            "b1": np.zeros(hidden_dim),
            "W2": rng.standard_normal((out_dim, hidden_dim)) * (0.1 / np.sqrt(hidden_dim)),
            "b2": np.zeros(out_dim),
            "Vh": rng.standard_normal((dn_hidden_dim, hidden_dim)) / np.sqrt(hidden_dim),
            "Vl": rng.standard_normal((dn_hidden_dim, t)),
            "Vb": rng.standard_normal((dn_hidden_dim, 4)),
            "c": np.zeros(dn_hidden_dim),
            "Ue": rng.standard_normal((embed_dim, dn_hidden_dim)) * (0.1 / np.sqrt(dn_hidden_dim)),
            "ce": prior * bias_dir,
            "Ub": rng.standard_normal((4, dn_hidden_dim)) * (0.1 / np.sqrt(dn_hidden_dim)),
            "cb": np.zeros(4),
        }
        if zero_output:
            p["W2"][:] = 0.0
        else:
            p["b2"][: num_queries * embed_dim] = np.tile(prior * bias_dir, num_queries)
        return cls(num_queries, embed_dim, feature_dim, p)

    def copy(self) -> "ToyDetector":
        return ToyDetector(
            self.num_queries, self.embed_dim, self.feature_dim, {k: v.copy() for k, v in self.params.items()}
        )

    # ------------------------------------------------------------------
    # forward

    def forward_batch(self, features: np.ndarray) -> dict:
        """Main branch for (B, F) features; returns a cache usable by :meth:`backward`."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {features.shape[1]}")
        p = self.params
        hidden = np.tanh((features - p["feature_mean"]) @ p["W1"].T + p["b1"])
        out = hidden @ p["W2"].T + p["b2"]
        b, q, d = features.shape[0], self.num_queries, self.embed_dim
        emb = out[:, : q * d].reshape(b, q, d)
        z = out[:, q * d :].reshape(b, q, 4)
        boxes = sigmoid(z)
        logits = emb @ p["text"].T
        return {"features": features, "hidden": hidden, "emb": emb, "boxes": boxes, "logits": logits}

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Logits (Q, T) and center-size boxes (Q, 4) for one scene."""
        cache = self.forward_batch(np.asarray(features, dtype=float)[None])
        return cache["logits"][0], cache["boxes"][0]

    def forward_denoising(self, hidden: np.ndarray, labels: np.ndarray, boxes: np.ndarray) -> dict:
        """Denoising branch for one scene's hidden state (H,) and N queries."""
        p = self.params
        onehot = np.eye(self.num_tokens)[np.asarray(labels, dtype=int)]
        u = np.tanh(hidden @ p["Vh"].T + onehot @ p["Vl"].T + boxes @ p["Vb"].T + p["c"])
        emb = u @ p["Ue"].T + p["ce"]
        z = _logit(boxes) + u @ p["Ub"].T + p["cb"]
        out_boxes = sigmoid(z)
        return {
            "hidden": hidden,
            "onehot": onehot,
            "in_boxes": boxes,
            "u": u,
            "emb": emb,
            "boxes": out_boxes,
            "logits": emb @ p["text"].T,
        }

    # ------------------------------------------------------------------
    # backward

    def backward(self, cache: dict, d_logits: np.ndarray, d_boxes: np.ndarray, dn: list | None = None) -> dict:
        """Parameter gradients given upstream gradients of the main outputs.

        ``dn`` is a list of ``(scene_index, dn_cache, d_dn_logits, d_dn_boxes)``.
        The text table and the input centering are frozen and get no gradient.
        """
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items() if k not in FROZEN}
        b = d_logits.shape[0]
        d_emb = d_logits @ p["text"]
        boxes = cache["boxes"]
        d_z = d_boxes * boxes * (1 - boxes)
        d_out = np.concatenate([d_emb.reshape(b, -1), d_z.reshape(b, -1)], axis=1)
        hidden = cache["hidden"]
        grads["W2"] = d_out.T @ hidden
        grads["b2"] = d_out.sum(0)
        d_hidden = d_out @ p["W2"]

        for i, dc, d_lg, d_bx in dn or []:
            d_e = d_lg @ p["text"]
            ob = dc["boxes"]
            d_zz = d_bx * ob * (1 - ob)
            u = dc["u"]
            grads["Ue"] += d_e.T @ u
            grads["ce"] += d_e.sum(0)
            grads["Ub"] += d_zz.T @ u
            grads["cb"] += d_zz.sum(0)
            d_pre = (d_e @ p["Ue"] + d_zz @ p["Ub"]) * (1 - u**2)
            grads["Vh"] += np.outer(d_pre.sum(0), dc["hidden"])
            grads["Vl"] += d_pre.T @ dc["onehot"]
            grads["Vb"] += d_pre.T @ dc["in_boxes"]
            grads["c"] += d_pre.sum(0)
            d_hidden[i] += d_pre.sum(0) @ p["Vh"]

        d_pre1 = d_hidden * (1 - hidden**2)
        grads["W1"] = d_pre1.T @ (cache["features"] - p["feature_mean"])
        grads["b1"] = d_pre1.sum(0)
        return grads

    # ------------------------------------------------------------------
    # persistence

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "Q": self.num_queries,
            "d": self.embed_dim,
            "T": self.num_tokens,
            "feature_dim": self.feature_dim,
            "vocabulary": [lab.prompt for lab in VOCABULARY],
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def from_json(cls, doc: dict) -> "ToyDetector":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
        model = cls(int(doc["Q"]), int(doc["d"]), int(doc["feature_dim"]), params)
        if model.num_tokens != int(doc["T"]):
            raise ValueError("text table does not match the declared token count")
        return model

    @classmethod
    def load(cls, path) -> "ToyDetector":
        return cls.from_json(json.loads(Path(path).read_text()))
