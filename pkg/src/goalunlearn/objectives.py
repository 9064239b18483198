"""Forget and retain objectives and the single unlearning step.

All losses average over the batch. L2 losses sum over an example's tokens;
cosine losses average over them so each stays in [0, 2]. Multi-layer losses
average over layers unless ``layer_reduce="sum"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import HiddenStates, ToyLM
from .probes import ProbeDirection
from .tensor import AdamState, DegenerateInputError, adam_step, zero_grad

METHODS = ("rmu", "adaptive-rmu", "cosine-rmu", "toxicity-probe")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class SteeringTarget:
    """Random unit direction ``u`` with a fixed scale ``c`` or adaptive ``beta``."""

    u: torch.Tensor
    target_layer: int
    c: float | None = 6.0
    beta: float | None = None

    def __post_init__(self):
        if abs(float(torch.linalg.vector_norm(self.u)) - 1.0) > 1e-12:
            raise ValueError("u must be a unit vector")
        if self.beta is not None:
            if self.beta <= 0:
                raise ValueError("beta must be positive")
        elif self.c is None or self.c <= 0:
            raise ValueError("c must be positive")

    @property
    def adaptive(self) -> bool:
        return self.beta is not None


def random_unit_vector(d: int, seed: int) -> torch.Tensor:
    """Uniform(0, 1) entries normalized to unit length."""
    gen = torch.Generator().manual_seed(seed)
    u = torch.rand(d, generator=gen, dtype=torch.float64)
    return u / torch.linalg.vector_norm(u)


@dataclass
class LossBreakdown:
    forget: float
    retain: float
    alpha: float
    total: float
    per_layer: dict[int, float] = field(default_factory=dict)


def _masked_mean_over_batch(per_token: torch.Tensor, mask: torch.Tensor, reduce: str) -> torch.Tensor:
    m = mask.to(per_token.dtype)
    per_example = (per_token * m).sum(1)
    if reduce == "mean":
        per_example = per_example / m.sum(1).clamp(min=1)
    return per_example.mean()


def _check_layer(states: HiddenStates, layer: int) -> torch.Tensor:
    if layer not in states.layers:
        raise ValueError(f"hidden states lack target layer {layer} (have {list(states.layers)})")
    return states.layer(layer)


def steering_scale(target: SteeringTarget, frozen: HiddenStates | None) -> torch.Tensor | float:
    """Per-token ``c``: fixed, or ``beta`` times the frozen state norm."""
    if not target.adaptive:
        return target.c
    if frozen is None:
        raise ValueError("adaptive scaling needs frozen hidden states")
    h = _check_layer(frozen, target.target_layer).detach()
    return target.beta * torch.linalg.vector_norm(h, dim=-1, keepdim=True)


def rmu_forget_l2(
    updated: HiddenStates, target: SteeringTarget, frozen: HiddenStates | None = None
) -> torch.Tensor:
    h = _check_layer(updated, target.target_layer)
    c = steering_scale(target, frozen)
    sq = ((h - c * target.u) ** 2).sum(-1)
    return _masked_mean_over_batch(sq, updated.token_mask(), "sum")


def _matching(updated: HiddenStates, frozen: HiddenStates, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
    h = _check_layer(updated, layer)
    f = _check_layer(frozen, layer).detach()
    if h.shape != f.shape or not torch.equal(updated.lengths, frozen.lengths):
        raise ValueError(f"shape mismatch: {tuple(h.shape)} vs {tuple(f.shape)}")
    return h, f


def rmu_retain_l2(updated: HiddenStates, frozen: HiddenStates, layer: int) -> torch.Tensor:
    h, f = _matching(updated, frozen, layer)
    return _masked_mean_over_batch(((h - f) ** 2).sum(-1), updated.token_mask(), "sum")


def _cosine_per_token(h: torch.Tensor, t: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    nh = torch.linalg.vector_norm(h, dim=-1)
    nt = torch.linalg.vector_norm(t, dim=-1)
    if bool(((nh == 0) & mask).any()) or bool(((nt == 0) & mask).any()):
        raise DegenerateInputError("zero-norm token state in cosine loss")
    # padded positions may legitimately be anything; keep them finite
    safe = torch.where(mask, nh * nt, torch.ones_like(nh))
    return (h * t).sum(-1) / safe


def cosine_forget(updated: HiddenStates, target: SteeringTarget) -> torch.Tensor:
    """Mean over tokens of ``1 - cos(h, c u)``; ``c`` cancels, so only ``u`` matters."""
    h = _check_layer(updated, target.target_layer)
    mask = updated.token_mask()
    cos = _cosine_per_token(h, target.u.expand_as(h), mask)
    return _masked_mean_over_batch(1.0 - cos, mask, "mean")


def cosine_retain(updated: HiddenStates, frozen: HiddenStates, layer: int) -> torch.Tensor:
    h, f = _matching(updated, frozen, layer)
    mask = updated.token_mask()
    return _masked_mean_over_batch(1.0 - _cosine_per_token(h, f, mask), mask, "mean")


def probe_direction_tensor(probe: ProbeDirection, normalize: bool = True) -> torch.Tensor:
    w = torch.as_tensor(np.asarray(probe.weights), dtype=torch.float64)
    if normalize:
        n = torch.linalg.vector_norm(w)
        if n == 0:
            raise DegenerateInputError(f"probe at layer {probe.layer} has zero weights")
        w = w / n
    return w


def toxicity_forget_terms(
    updated: HiddenStates, probes: Sequence[ProbeDirection], normalize: bool = True
) -> dict[int, torch.Tensor]:
    """Per-layer batch mean of ``(h_last . w)^2``."""
    probe_layers = sorted(p.layer for p in probes)
    if probe_layers != sorted(updated.layers) or len(set(probe_layers)) != len(probe_layers):
        raise ValueError(f"layer mismatch: states {list(updated.layers)} vs probes {probe_layers}")
    terms = {}
    for p in sorted(probes, key=lambda p: p.layer):
        h = updated.last_token(p.layer)
        terms[p.layer] = ((h @ probe_direction_tensor(p, normalize)) ** 2).mean()
    return terms


def toxicity_forget(
    updated: HiddenStates,
    probes: Sequence[ProbeDirection],
    normalize: bool = True,
    layer_reduce: str = "mean",
) -> torch.Tensor:
    terms = list(toxicity_forget_terms(updated, probes, normalize).values())
    total = torch.stack(terms).sum()
    return total / len(terms) if layer_reduce == "mean" else total


def total_loss(forget: float, retain: float, alpha: float, per_layer: dict | None = None) -> LossBreakdown:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not all(math.isfinite(x) for x in (forget, retain, alpha)):
        raise NonFiniteLossError(f"non-finite loss terms: forget={forget} retain={retain} alpha={alpha}")
    return LossBreakdown(forget, retain, alpha, forget + alpha * retain, dict(per_layer or {}))


@dataclass
class UnlearnConfig:
    method: str = "cosine-rmu"
    layers: tuple[int, ...] = (5,)
    update_layers: tuple[int, ...] | None = None  # MLPs to train; None means ``layers``
    c: float = 6.0
    beta: float = 2.0
    lr: float = 1e-3
    retain_loss: str | None = None  # None picks per method: cosine for cosine-rmu, else l2
    full_model: bool = False
    probe_normalize: bool = True
    layer_reduce: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.layers = tuple(sorted(set(self.layers)))
        if self.update_layers is None:
            self.update_layers = self.layers
        self.update_layers = tuple(sorted(set(self.update_layers)))
        if self.retain_loss is None:
            self.retain_loss = "cosine" if self.method == "cosine-rmu" else "l2"
        if self.retain_loss not in ("l2", "cosine"):
            raise ValueError(f"unknown retain loss {self.retain_loss!r}")
        if self.layer_reduce not in ("mean", "sum"):
            raise ValueError("layer_reduce must be 'mean' or 'sum'")


class Unlearner:
    """Owns the optimizer state and method targets for one unlearning run."""

    def __init__(
        self,
        model: ToyLM,
        frozen: ToyLM,
        config: UnlearnConfig,
        probes: Sequence[ProbeDirection] | None = None,
    ):
        model.assert_trainable()
        if not frozen.frozen:
            raise ValueError("reference model must be a frozen clone")
        self.model, self.frozen, self.config = model, frozen, config
        for i in config.layers + config.update_layers:
            if not 0 <= i < model.cfg.n_layers:
                raise IndexError(f"invalid layer {i}")
        if config.full_model:
            named = [(n, p) for n, p in model.named_parameters()]
        else:
            named = list(zip(model.mlp_parameter_names(config.update_layers),
                             model.mlp_parameters(config.update_layers)))
        self.param_names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.adam = AdamState()
        u = random_unit_vector(model.cfg.d_model, config.seed)
        self.targets = {
            i: SteeringTarget(u, i, c=config.c, beta=config.beta if config.method == "adaptive-rmu" else None)
            for i in config.layers
        }
        self.probes = list(probes or [])
        if config.method == "toxicity-probe":
            if sorted(p.layer for p in self.probes) != list(config.layers):
                raise ValueError("toxicity-probe needs exactly one probe per target layer")

    def losses(self, forget_batch, retain_batch) -> tuple[torch.Tensor, torch.Tensor, dict[int, torch.Tensor]]:
        cfg = self.config
        layers = cfg.layers
        _, h_f = self.model(forget_batch, hook_layers=layers)
        if cfg.method == "toxicity-probe":
            terms = toxicity_forget_terms(h_f, self.probes, cfg.probe_normalize)
        else:
            frozen_f = None
            if cfg.method == "adaptive-rmu":
                with torch.no_grad():
                    _, frozen_f = self.frozen(forget_batch, hook_layers=layers)
            terms = {}
            for i in layers:
                if cfg.method == "cosine-rmu":
                    terms[i] = cosine_forget(h_f, self.targets[i])
                else:
                    terms[i] = rmu_forget_l2(h_f, self.targets[i], frozen_f)
        forget = torch.stack(list(terms.values())).sum()
        if cfg.layer_reduce == "mean":
            forget = forget / len(terms)

        _, h_r = self.model(retain_batch, hook_layers=layers)
        with torch.no_grad():
            _, frozen_r = self.frozen(retain_batch, hook_layers=layers)
        retain_fn = cosine_retain if cfg.retain_loss == "cosine" else rmu_retain_l2
        retain = torch.stack([retain_fn(h_r, frozen_r, i) for i in layers]).sum()
        if cfg.layer_reduce == "mean":
            retain = retain / len(layers)
        return forget, retain, terms

    def step(self, forget_batch, retain_batch, alpha: float) -> LossBreakdown:
        """Compose forget + alpha * retain, backpropagate and take one Adam step."""
        zero_grad(self.params)
        forget, retain, terms = self.losses(forget_batch, retain_batch)
        bd = total_loss(forget.item(), retain.item(), alpha, {i: t.item() for i, t in terms.items()})
        if not math.isfinite(bd.total):
            raise NonFiniteLossError(f"non-finite total loss: {bd}")
        grads = torch.autograd.grad(forget + alpha * retain, self.params)
        for p, g in zip(self.params, grads):
            p.grad = g
        adam_step(self.params, self.config.lr, self.adam, self.param_names)
        return bd

    @torch.no_grad()
    def evaluate(self, forget_batch, retain_batch, alpha: float) -> LossBreakdown:
        forget, retain, terms = self.losses(forget_batch, retain_batch)
        return total_loss(forget.item(), retain.item(), alpha, {i: t.item() for i, t in terms.items()})


def unlearn_step(model, frozen, batch_forget, batch_retain, config: UnlearnConfig,
                 alpha: float = 1.0, probes=None, unlearner: Unlearner | None = None) -> LossBreakdown:
    """Functional entry point; pass ``unlearner`` to keep Adam moments across calls."""
    u = unlearner or Unlearner(model, frozen, config, probes)
    return u.step(batch_forget, batch_retain, alpha)
