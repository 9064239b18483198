"""Logistic-regression toxicity probes on hidden states, and their geometry."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import LabeledSentence

log = logging.getLogger(__name__)


@dataclass
class ProbeDirection:
    layer: int
    weights: np.ndarray
    bias: float
    train_auc: float  # measured on the held-out split
    l2_strength: float
    seed: int = 0
    converged: bool = True
    final_loss: float = float("nan")

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "l2_strength": self.l2_strength,
            "train_auc": self.train_auc,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProbeDirection":
        return cls(d["layer"], np.asarray(d["weights"], dtype=np.float64), d["bias"],
                   d["train_auc"], d["l2_strength"], d.get("seed", 0))


@dataclass
class SimilarityMatrix:
    layers: list[int]
    matrix: np.ndarray = field(repr=False)

    def to_csv(self) -> str:
        rows = ["layer," + ",".join(str(l) for l in self.layers)]
        for l, row in zip(self.layers, self.matrix):
            rows.append(f"{l}," + ",".join(repr(float(x)) for x in row))
        return "\n".join(rows) + "\n"


@torch.no_grad()
def extract_last_token_states(
    frozen, sentences: Sequence[LabeledSentence], layers: Iterable[int], pooling: str = "last"
) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Per-layer ``[n, d_model]`` design matrices and the aligned 0/1 labels.

    ``pooling="mean"`` averages over all real positions instead of taking the
    last one; it exists for the pooling comparison.
    """
    if not sentences:
        raise ValueError("no sentences")
    layers = sorted(set(layers))
    _, hs = frozen([list(s.tokens) for s in sentences], hook_layers=layers)
    out = {}
    for i in layers:
        if pooling == "last":
            out[i] = hs.last_token(i).numpy().copy()
        elif pooling == "mean":
            mask = hs.token_mask(skip_first=False).unsqueeze(-1).to(hs.layer(i).dtype)
            out[i] = ((hs.layer(i) * mask).sum(1) / mask.sum(1)).numpy().copy()
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
    labels = np.array([1.0 if s.toxic else 0.0 for s in sentences])
    return out, labels


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def split_indices(labels: np.ndarray, seed: int, test_frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Stratified shuffle split, so both halves keep both classes."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0.0, 1.0):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_test = max(1, int(round(test_frac * len(idx))))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _objective(w, b, X, y, l2):
    z = X @ w + b
    # log(1 + exp(-s z)) with s = +-1
    s = 2 * y - 1
    loss = np.mean(np.logaddexp(0.0, -s * z)) + 0.5 * l2 * w @ w
    p = 1.0 / (1.0 + np.exp(-z))
    r = (p - y) / len(y)
    gw = X.T @ r + l2 * w
    gb = r.sum()
    return loss, gw, gb, p


def fit_logistic(
    X: np.ndarray, y: np.ndarray, l2: float, init_seed: int = 0,
    tol: float = 1e-6, max_iter: int = 10000,
) -> tuple[np.ndarray, float, float, bool]:
    """Minimize mean logistic loss + l2/2 ||w||^2 (bias unpenalized).

    Full-batch damped Newton steps with backtracking; stops once the gradient
    norm drops below ``tol``. Returns ``(w, b, final_loss, converged)``.
    """
    n, d = X.shape
    rng = np.random.default_rng(init_seed)
    w = rng.normal(scale=0.01, size=d)
    b = 0.0
    A = np.hstack([X, np.ones((n, 1))])
    reg = np.diag(np.r_[np.full(d, l2), 0.0])
    for _ in range(max_iter):
        loss, gw, gb, p = _objective(w, b, X, y, l2)
        g = np.r_[gw, gb]
        if np.linalg.norm(g) < tol:
            return w, b, loss, True
        H = (A * (p * (1 - p) / n)[:, None]).T @ A + reg
        H[-1, -1] += 1e-12
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-10:
            w_new, b_new = w - t * step[:-1], b - t * step[-1]
            if _objective(w_new, b_new, X, y, l2)[0] <= loss - 1e-4 * t * g @ step:
                break
            t *= 0.5
        else:
            return w, b, loss, np.linalg.norm(g) < tol
        w, b = w_new, b_new
    loss, gw, gb, _ = _objective(w, b, X, y, l2)
    return w, b, loss, bool(np.linalg.norm(np.r_[gw, gb]) < tol)


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    l2_strength: float = 0.01,
    seed: int = 0,
    layer: int = -1,
    init_seed: int | None = None,
) -> ProbeDirection:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if min((y == 0).sum(), (y == 1).sum()) < 2:
        raise ValueError("train_probe needs at least two examples of each class")
    tr, te = split_indices(y, seed)
    w, b, loss, ok = fit_logistic(X[tr], y[tr], l2_strength, seed if init_seed is None else init_seed)
    if not ok:
        log.warning("probe at layer %s did not reach gradient tolerance", layer)
    auc = roc_auc(X[te] @ w + b, y[te])
    return ProbeDirection(layer, w, float(b), auc, l2_strength, seed, ok, float(loss))


def train_layer_probes(
    frozen, sentences: Sequence[LabeledSentence], layers: Iterable[int],
    l2_strength: float = 0.01, seed: int = 0,
) -> list[ProbeDirection]:
    feats, y = extract_last_token_states(frozen, sentences, layers)
    return [train_probe(feats[i], y, l2_strength, seed, layer=i) for i in sorted(feats)]


def probe_similarity_matrix(probes: Sequence[ProbeDirection]) -> SimilarityMatrix:
    if len(probes) < 2:
        raise ValueError("need at least two probes")
    W = np.stack([p.weights for p in probes])
    norms = np.linalg.norm(W, axis=1)
    if (norms == 0).any():
        raise ValueError("zero-weight probe has no direction")
    U = W / norms[:, None]
    S = np.clip(U @ U.T, -1.0, 1.0)
    S = (S + S.T) / 2
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix([p.layer for p in probes], S)


def weight_distribution_stats(probe: ProbeDirection, bins: int = 20) -> dict:
    w = np.asarray(probe.weights, dtype=np.float64)
    counts, edges = np.histogram(w, bins=bins)
    return {
        "min": float(w.min()),
        "max": float(w.max()),
        "mean": float(w.mean()),
        "stdev": float(w.std()),
        "histogram": [(float(edges[k]), float(edges[k + 1]), int(counts[k])) for k in range(bins)],
    }


def histogram_csv(stats: dict) -> str:
    rows = ["bin_left,bin_right,count"]
    rows += [f"{l!r},{r!r},{c}" for l, r, c in stats["histogram"]]
    return "\n".join(rows) + "\n"


def save_probe_bundle(probes: Sequence[ProbeDirection], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"probes": [p.to_json() for p in probes]}, sort_keys=True, indent=1))


def load_probe_bundle(path: str | Path) -> list[ProbeDirection]:
    return [ProbeDirection.from_json(d) for d in json.loads(Path(path).read_text())["probes"]]
