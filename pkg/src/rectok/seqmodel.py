"""Small decoder-only transformer over the artifact's token vocabulary.

The model owns its vocabulary reference and optimizer state; the
embedding table grows in place when new identifier tokens are minted, and
the output projection is tied to the embeddings.  Training is next-token
prediction on response tokens only, deterministic per seed.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .prompts import PromptPair
from .seeding import derive_seed
from .vocab import PAD, TokenVocabulary

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; the message names the offending step."""


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    context: int = 128
    seed: int = 0
    new_token_std: float = 0.02


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        head_dim = c // self.heads
        q, k, v = self.qkv(x).split(c, dim=2)
        q = q.view(b, t, self.heads, head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class SequenceModel(nn.Module):
    """Decoder-only transformer with a growable, weight-tied embedding table."""

    def __init__(self, vocab: TokenVocabulary, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.config = config or ModelConfig()
        self.vocab = vocab
        torch.manual_seed(derive_seed(self.config.seed, "model", "init"))
        self.tok_emb = nn.Embedding(len(vocab), self.config.dim)
        self.pos_emb = nn.Embedding(self.config.context, self.config.dim)
        self.blocks = nn.ModuleList(
            Block(self.config.dim, self.config.heads) for _ in range(self.config.layers)
        )
        self.ln_f = nn.LayerNorm(self.config.dim)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self._opt: torch.optim.Adam | None = None
        self.epoch_losses: list[float] = []

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.num_embeddings

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() != 2:
            raise ValueError("expected a (batch, time) id tensor")
        b, t = ids.shape
        if t > self.config.context:
            raise ValueError(f"sequence length {t} exceeds context {self.config.context}")
        pos = torch.arange(t, device=ids.device)
        h = self.tok_emb(ids) + self.pos_emb(pos)[None, :, :]
        for block in self.blocks:
            h = block(h)
        h = self.ln_f(h)
        return h @ self.tok_emb.weight.T

    def grow_vocab(self) -> int:
        """Extend the embedding table to cover newly registered tokens.

        New rows are seeded small-variance noise; optimizer state for the
        old rows is preserved, new rows start from zero moments.  Returns
        the number of rows added.
        """
        old_size = self.tok_emb.num_embeddings
        new_size = len(self.vocab)
        if new_size == old_size:
            return 0
        if new_size < old_size:
            raise ValueError("vocabulary shrank; token ids must be stable")
        gen = torch.Generator()
        gen.manual_seed(derive_seed(self.config.seed, "model", "grow", old_size, new_size))
        new_emb = nn.Embedding(new_size, self.config.dim)
        new_emb.to(self.tok_emb.weight.dtype)
        with torch.no_grad():
            new_emb.weight.normal_(std=self.config.new_token_std, generator=gen)
            new_emb.weight[:old_size] = self.tok_emb.weight
        self._transplant_optimizer_state(self.tok_emb.weight, new_emb.weight)
        self.tok_emb = new_emb
        log.info("embedding table grown from %d to %d tokens", old_size, new_size)
        return new_size - old_size

    def _transplant_optimizer_state(self, old_param: torch.Tensor, new_param: torch.Tensor) -> None:
        if self._opt is None:
            return
        state = self._opt.state.pop(old_param, None)
        if state is not None:
            for key in ("exp_avg", "exp_avg_sq"):
                old_state = state[key]
                padded = torch.zeros_like(new_param)
                padded[: old_state.shape[0]] = old_state
                state[key] = padded
            self._opt.state[new_param] = state
        for group in self._opt.param_groups:
            group["params"] = [new_param if p is old_param else p for p in group["params"]]

    def ensure_optimizer(self, lr: float) -> torch.optim.Adam:
        if self._opt is None:
            self._opt = torch.optim.Adam(self.parameters(), lr=lr)
        else:
            for group in self._opt.param_groups:
                group["lr"] = lr
        return self._opt

    def clone(self) -> "SequenceModel":
        """Deep copy of parameters, vocabulary, and optimizer state."""
        return copy.deepcopy(self)


def _validate_pair(model: SequenceModel, pair: PromptPair) -> None:
    if not pair.response:
        raise ValueError("response must be non-empty")
    if not pair.instruction:
        raise ValueError("instruction must be non-empty")
    top = max(max(pair.instruction), max(pair.response))
    if top >= model.vocab_size:
        raise ValueError(f"token id {top} outside the model vocabulary")


def nll_loss(model: SequenceModel, pair: PromptPair) -> torch.Tensor:
    """Negative log-likelihood of the response, summed over response tokens."""
    _validate_pair(model, pair)
    ids = list(pair.instruction) + list(pair.response)
    if len(ids) - 1 > model.config.context:
        raise ValueError("prompt does not fit the model context")
    inputs = torch.tensor([ids[:-1]], dtype=torch.long)
    log_probs = F.log_softmax(model(inputs)[0], dim=-1)
    start = len(pair.instruction)
    positions = torch.arange(start, len(ids))
    targets = torch.tensor(ids[start:], dtype=torch.long)
    return -log_probs[positions - 1, targets].sum()


def perplexity(
    model: SequenceModel, instruction: Sequence[int], response: Sequence[int]
) -> float:
    """Length-normalized perplexity ``exp(nll / |response|)``."""
    pair = PromptPair(tuple(instruction), tuple(response), task="score")
    with torch.no_grad():
        nll = float(nll_loss(model, pair))
    return math.exp(nll / len(response))


def _batch_tensors(
    pairs: Sequence[PromptPair], pad_id: int, context: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    lengths = [len(p.instruction) + len(p.response) for p in pairs]
    t_max = max(lengths)
    if t_max - 1 > context:
        raise ValueError(f"prompt of length {t_max} does not fit context {context}")
    ids = torch.full((len(pairs), t_max), pad_id, dtype=torch.long)
    mask = torch.zeros((len(pairs), t_max - 1), dtype=torch.bool)
    for row, pair in enumerate(pairs):
        seq = list(pair.instruction) + list(pair.response)
        ids[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        # target index j predicts seq[j + 1]; responses span the tail
        mask[row, len(pair.instruction) - 1 : len(seq) - 1] = True
    return ids[:, :-1], ids[:, 1:], mask


def train_model(
    model: SequenceModel,
    pairs: Sequence[PromptPair],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> list[float]:
    """Next-token training on response tokens; returns per-epoch mean loss.

    Mutates the model in place (parameters and optimizer state) and is
    bitwise reproducible for a fixed seed, data, and thread count.  Zero
    epochs is a no-op.
    """
    if not pairs:
        raise ValueError("empty training set")
    for pair in pairs:
        _validate_pair(model, pair)
    pad_id = model.vocab.id(PAD)
    rng = np.random.default_rng(derive_seed(seed, "train", "shuffle"))
    optimizer = model.ensure_optimizer(lr)
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total_nll = 0.0
        for step, start in enumerate(range(0, len(pairs), batch_size)):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            inputs, targets, mask = _batch_tensors(batch, pad_id, model.config.context)
            log_probs = F.log_softmax(model(inputs), dim=-1)
            token_ll = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
            per_pair = -(token_ll * mask).sum(dim=1)
            loss = per_pair.mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_nll += float(per_pair.detach().sum())
        epoch_losses.append(total_nll / len(pairs))
    model.epoch_losses.extend(epoch_losses)
    return epoch_losses


def nll_gradient_check(
    model: SequenceModel,
    pair: PromptPair,
    n_params: int = 10,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of backprop vs central differences on ``nll_loss``.

    Runs on a float64 clone so finite differences are meaningful.
    """
    rng = rng or np.random.default_rng(0)
    probe = model.clone().double()
    loss = nll_loss(probe, pair)
    probe.zero_grad()
    loss.backward()
    params = list(probe.parameters())
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    worst = 0.0
    for _ in range(n_params):
        flat = int(rng.integers(total))
        p_idx = 0
        while flat >= sizes[p_idx]:
            flat -= sizes[p_idx]
            p_idx += 1
        param = params[p_idx]
        analytic = float(param.grad.reshape(-1)[flat]) if param.grad is not None else 0.0
        with torch.no_grad():
            original = float(param.reshape(-1)[flat])
            param.reshape(-1)[flat] = original + step
            up = float(nll_loss(probe, pair))
            param.reshape(-1)[flat] = original - step
            down = float(nll_loss(probe, pair))
            param.reshape(-1)[flat] = original
        fd = (up - down) / (2.0 * step)
        err = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-3)
        worst = max(worst, err)
    return worst


CHECKPOINT_FORMAT = "seqmodel-checkpoint-v1"


def save_checkpoint(model: SequenceModel, path: str | Path, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "tokens": list(model.vocab.tokens()),
        "state": model.state_dict(),
        "optimizer": model._opt.state_dict() if model._opt is not None else None,
        "epoch_losses": list(model.epoch_losses),
        "extra": dict(extra),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[SequenceModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a model checkpoint: {path}")
    vocab = TokenVocabulary.from_tokens(payload["tokens"])
    model = SequenceModel(vocab, ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    if payload["optimizer"] is not None:
        lr = payload["optimizer"]["param_groups"][0]["lr"]
        model.ensure_optimizer(lr)
        model._opt.load_state_dict(payload["optimizer"])
    model.epoch_losses = list(payload["epoch_losses"])
    return model, payload["extra"]
