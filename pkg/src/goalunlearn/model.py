"""A small pre-norm (RMSNorm) decoder-only transformer with per-layer residual hooks."""

from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor import DTYPE, AdamState, adam_step, zero_grad

CHECKPOINT_VERSION = 1
PAD_ID = 0


class FrozenModelError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class HiddenStates:
    """Residual-stream outputs captured after the requested blocks.

    ``states[k]`` has shape ``[batch, tokens, d_model]`` for ``layers[k]``;
    ``lengths`` holds the unpadded length of every sequence in the batch.
    """

    layers: tuple[int, ...]
    states: tuple[torch.Tensor, ...]
    lengths: torch.Tensor

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, i: int) -> torch.Tensor:
        try:
            return self.states[self.layers.index(i)]
        except ValueError:
            raise KeyError(f"layer {i} was not captured (have {list(self.layers)})") from None

    def last_token(self, i: int) -> torch.Tensor:
        h = self.layer(i)
        idx = (self.lengths - 1).clamp(min=0)
        return h[torch.arange(h.shape[0]), idx]

    def token_mask(self, skip_first: bool = True) -> torch.Tensor:
        """Boolean ``[batch, tokens]`` mask of real positions.

        The first (BOS) position is skipped by default: its state does not
        depend on the input, so it cannot carry forget/retain information.
        """
        T = self.states[0].shape[1] if self.states else int(self.lengths.max())
        pos = torch.arange(T).unsqueeze(0)
        mask = pos < self.lengths.unsqueeze(1)
        if skip_first:
            mask = mask & (pos > 0)
        return mask


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, H, D // H).transpose(1, 2)
        k = k.view(B, T, H, D // H).transpose(1, 2)
        v = v.view(B, T, H, D // H).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // H)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyLM(nn.Module):
    """Decoder-only transformer; ``frozen`` models refuse parameter updates."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = False
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.to(DTYPE)
        self._init_weights()

    @torch.no_grad()
    def _init_weights(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.02)
        # residual projections scaled down with depth
        for blk in self.blocks:
            blk.proj.weight.mul_(1.0 / math.sqrt(2 * self.cfg.n_layers))
            blk.fc2.weight.mul_(1.0 / math.sqrt(2 * self.cfg.n_layers))

    def mlp_parameters(self, layers: Iterable[int]) -> list[nn.Parameter]:
        params = []
        for i in sorted(set(layers)):
            blk = self.blocks[i]
            params += [blk.fc1.weight, blk.fc1.bias, blk.fc2.weight, blk.fc2.bias]
        return params

    def mlp_parameter_names(self, layers: Iterable[int]) -> list[str]:
        names = []
        for i in sorted(set(layers)):
            names += [f"blocks.{i}.{n}" for n in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")]
        return names

    def forward(
        self, tokens: torch.Tensor | Sequence[Sequence[int]], hook_layers: Iterable[int] = ()
    ) -> tuple[torch.Tensor, HiddenStates]:
        ids, lengths = self._prepare(tokens)
        hooks = sorted(set(hook_layers))
        for i in hooks:
            if not 0 <= i < self.cfg.n_layers:
                raise IndexError(f"invalid layer index {i} for {self.cfg.n_layers} layers")
        T = ids.shape[1]
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(T)).unsqueeze(0)
        captured = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i in hooks:
                captured.append(x)
        logits = self.head(self.ln_f(x))
        return logits, HiddenStates(tuple(hooks), tuple(captured), lengths)

    def _prepare(self, tokens) -> tuple[torch.Tensor, torch.Tensor]:
        if isinstance(tokens, torch.Tensor):
            ids = tokens.long()
            if ids.dim() == 1:
                ids = ids.unsqueeze(0)
            lengths = torch.full((ids.shape[0],), ids.shape[1], dtype=torch.long)
        else:
            if len(tokens) == 0:
                raise ValueError("token sequences must be nonempty")
            seqs = [list(tokens)] if isinstance(tokens[0], (int, np.integer)) else [list(s) for s in tokens]
            ids, lengths = pad_batch(seqs)
        if ids.numel() == 0 or ids.shape[1] == 0 or bool((lengths == 0).any()):
            raise ValueError("token sequences must be nonempty")
        if ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if bool((ids < 0).any()) or bool((ids >= self.cfg.vocab_size).any()):
            raise ValueError(f"token id outside vocabulary [0, {self.cfg.vocab_size})")
        return ids, lengths

    def assert_trainable(self) -> None:
        if self.frozen:
            raise FrozenModelError("model is frozen")


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    T = int(lengths.max()) if len(seqs) else 0
    ids = torch.full((len(seqs), T), PAD_ID, dtype=torch.long)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return ids, lengths


def lm_loss(model: ToyLM, batch: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean next-token cross entropy over real (non-pad) targets."""
    ids, lengths = pad_batch(batch)
    logits, _ = model(ids[:, :-1]) if ids.shape[1] > 1 else (None, None)
    if logits is None:
        raise ValueError("sequences need at least two tokens for next-token training")
    targets = ids[:, 1:]
    pos = torch.arange(targets.shape[1]).unsqueeze(0)
    mask = pos < (lengths - 1).unsqueeze(1)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    return (ce * mask.reshape(-1)).sum() / mask.sum()


def pretrain(
    model: ToyLM,
    corpus: Sequence[Sequence[int]],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Next-token training with Adam; returns the mean loss of every epoch."""
    model.assert_trainable()
    if not corpus:
        raise ValueError("corpus is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState()
    gen = torch.Generator().manual_seed(seed)
    history = []
    step = 0
    for _ in range(epochs):
        order = torch.randperm(len(corpus), generator=gen).tolist()
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            zero_grad(params)
            loss = lm_loss(model, batch)
            if not math.isfinite(loss.item()):
                raise DivergenceError(step, loss.item())
            loss.backward()
            adam_step(params, lr, state)
            total += loss.item() * len(batch)
            count += len(batch)
            step += 1
        history.append(total / count)
    return history


def clone_frozen(model: ToyLM) -> ToyLM:
    twin = copy.deepcopy(model)
    for p in twin.parameters():
        p.requires_grad_(False)
    twin.frozen = True
    twin.eval()
    return twin


def select_layer_regions(n_layers: int, per_region: int) -> list[int]:
    """Evenly spaced picks from the early, middle and late thirds of depth.

    Remainder layers go to the later regions, so 13 layers split 4/4/5.
    """
    if per_region < 1:
        raise ValueError("per_region must be >= 1")
    if 3 * per_region > n_layers:
        raise ValueError(f"per_region={per_region} too large for {n_layers} layers")
    base, rem = divmod(n_layers, 3)
    sizes = [base + (1 if r >= 3 - rem else 0) for r in range(3)]
    picks, start = [], 0
    for size in sizes:
        if per_region == 1:
            offsets = [0]
        else:
            offsets = [(k * (size - 1)) // (per_region - 1) for k in range(per_region)]
        picks += [start + o for o in offsets]
        start += size
    return sorted(set(picks))


def save_checkpoint(model: ToyLM, path: str | Path) -> None:
    weights = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f8")
        weights[name] = {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode()}
    doc = {"version": CHECKPOINT_VERSION, "config": asdict(model.cfg), "weights": weights}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> ToyLM:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = ToyLM(ModelConfig(**doc["config"]))
    state = {}
    for name, w in doc["weights"].items():
        arr = np.frombuffer(base64.b64decode(w["data"]), dtype="<f8").reshape(w["shape"])
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model
