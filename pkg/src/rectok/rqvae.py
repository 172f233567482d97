"""Residual-quantized autoencoder for item identifier initialization.

An encoder MLP compresses each semantic embedding to a latent vector,
which is quantized level by level against a stack of codebooks: at each
level the nearest codeword (squared distance, ties to the lowest index)
is selected and subtracted from the running residual.  Training combines

* reconstruction: ``|x - Decoder(z_hat)|^2`` with a straight-through
  estimator feeding the decoder,
* commitment: ``sum_l |sg(r_l) - e_l|^2 + |r_l - sg(e_l)|^2``,
* optional collaborative and diversity regularizers (log-softmax
  contrastive terms over the batch / over each level's codewords).

The selected code sequence per item becomes its initial identifier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cluster import balanced_kmeans, kmeans
from .identifiers import IdentifierMap, level_token
from .seeding import derive_seed

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Invalid quantizer configuration (e.g. an empty codebook)."""


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; the message names the offending step."""


@dataclass
class RqvaeConfig:
    levels: int = 3
    codebook_size: int = 8
    input_dim: int = 16
    latent_dim: int = 8
    hidden_dim: int = 32
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    cf_weight: float = 0.0
    div_weight: float = 0.0
    div_clusters: int = 4
    temperature: float = 1.0  # softmax temperature of both contrastive terms


class CodebookStack:
    """L codebooks, each an (N, d) array of codeword vectors."""

    def __init__(self, levels: Sequence[np.ndarray]) -> None:
        if len(levels) == 0:
            raise ConfigurationError("need at least one codebook level")
        arrays = [np.asarray(cb, dtype=np.float64) for cb in levels]
        dim = None
        for cb in arrays:
            if cb.ndim != 2 or cb.shape[0] < 2:
                raise ConfigurationError("each codebook needs >= 2 codewords")
            if not np.isfinite(cb).all():
                raise ConfigurationError("codebooks must be finite")
            if dim is None:
                dim = cb.shape[1]
            elif cb.shape[1] != dim:
                raise ConfigurationError("codebook dimensions disagree")
        self.levels = arrays

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> np.ndarray:
        return self.levels[level]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    @property
    def size(self) -> int:
        return self.levels[0].shape[0]


@dataclass
class QuantizationResult:
    codes: tuple[int, ...]
    residuals: list[np.ndarray]  # r_1 .. r_{L+1}
    quantized: np.ndarray


def nearest_code(residual: np.ndarray, codebook: np.ndarray) -> int:
    """Index of the codeword nearest to ``residual``; ties to the lowest index."""
    dists = ((codebook - residual[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(dists))


def quantize(z: np.ndarray, codebooks: CodebookStack) -> QuantizationResult:
    """Greedy residual quantization of one latent vector.

    The residual recurrence ``r_{l+1} = r_l - e_{t_l}`` holds bit-exactly,
    and ``quantized`` is computed as ``z - r_{L+1}`` so that the telescoped
    identity ``z - quantized == r_{L+1}`` is exact as well.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (codebooks.dim,):
        raise ValueError(f"latent has shape {z.shape}, expected ({codebooks.dim},)")
    residuals = [z]
    codes = []
    r = z
    for codebook in codebooks.levels:
        t = nearest_code(r, codebook)
        codes.append(t)
        r = r - codebook[t]
        residuals.append(r)
    return QuantizationResult(codes=tuple(codes), residuals=residuals, quantized=z - residuals[-1])


def _assign_codes(latents: np.ndarray, codebooks: CodebookStack) -> np.ndarray:
    """Vectorized residual code assignment for a batch; same tie-break as quantize."""
    r = np.asarray(latents, dtype=np.float64).copy()
    codes = np.empty((r.shape[0], len(codebooks)), dtype=np.int64)
    for level, codebook in enumerate(codebooks.levels):
        dists = ((r[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
        idx = dists.argmin(axis=1)
        codes[:, level] = idx
        r -= codebook[idx]
    return codes


def reconstruction_loss(x, decoded) -> torch.Tensor:
    """Squared-L2 reconstruction error; batches are averaged over rows."""
    x = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    decoded = torch.as_tensor(decoded, dtype=x.dtype) if not torch.is_tensor(decoded) else decoded
    if x.shape != decoded.shape:
        raise ValueError("shape mismatch between input and reconstruction")
    per_item = ((x - decoded) ** 2).sum(dim=-1)
    return per_item.mean() if per_item.dim() else per_item


def commitment_loss(residuals, codewords) -> torch.Tensor:
    """Two-sided stop-gradient penalty binding residuals to selected codewords.

    The first term routes gradient to the codewords, the second to the
    residuals; forward values of both terms coincide.
    """
    if len(residuals) != len(codewords) or len(residuals) == 0:
        raise ValueError("need one (residual, codeword) pair per level")
    total = None
    for r, e in zip(residuals, codewords):
        r = torch.as_tensor(r, dtype=torch.float64) if not torch.is_tensor(r) else r
        e = torch.as_tensor(e, dtype=r.dtype) if not torch.is_tensor(e) else e
        term = ((r.detach() - e) ** 2).sum(dim=-1) + ((r - e.detach()) ** 2).sum(dim=-1)
        term = term.mean() if term.dim() else term
        total = term if total is None else total + term
    return total


def collaborative_loss(quantized, cf, temperature: float = 1.0) -> torch.Tensor:
    """Batch contrastive alignment of quantized latents with CF embeddings.

    Negative log-softmax of the matched inner product against all in-batch
    CF embeddings, averaged over the batch.
    """
    z = torch.as_tensor(quantized, dtype=torch.float64) if not torch.is_tensor(quantized) else quantized
    h = torch.as_tensor(cf, dtype=z.dtype) if not torch.is_tensor(cf) else cf
    if z.dim() != 2 or z.shape != h.shape:
        raise ValueError("quantized and CF batches must be 2-D with equal shapes")
    if z.shape[0] < 2:
        raise ValueError("collaborative loss needs a batch of at least 2")
    logits = (z @ h.T) / temperature
    targets = torch.arange(z.shape[0])
    return F.cross_entropy(logits, targets)


def diversity_loss(
    codewords,
    clusters: np.ndarray,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Contrastive pull toward a random same-cluster codeword, push from all others.

    A codeword alone in its cluster uses itself as the positive (flagged in
    the debug log).
    """
    cw = torch.as_tensor(codewords, dtype=torch.float64) if not torch.is_tensor(codewords) else codewords
    clusters = np.asarray(clusters)
    positives = _draw_positives(clusters, rng)
    logits = (cw @ cw.T) / temperature
    return F.cross_entropy(logits, torch.as_tensor(positives))


def _draw_positives(clusters: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = clusters.shape[0]
    positives = np.empty(n, dtype=np.int64)
    singletons = 0
    for i in range(n):
        same = np.flatnonzero(clusters == clusters[i])
        others = same[same != i]
        if others.size == 0:
            positives[i] = i
            singletons += 1
        else:
            positives[i] = int(rng.choice(others))
    if singletons:
        log.debug("diversity loss: %d singleton clusters use self-positives", singletons)
    return positives


class RqvaeModel(nn.Module):
    """Encoder/decoder MLPs plus learnable codebooks, in float64."""

    def __init__(self, config: RqvaeConfig) -> None:
        super().__init__()
        self.config = config
        d_in, d_lat, d_hid = config.input_dim, config.latent_dim, config.hidden_dim
        self.encoder = nn.Sequential(
            nn.Linear(d_in, d_hid), nn.ReLU(), nn.Linear(d_hid, d_lat)
        )
        self.decoder = nn.Sequential(
            nn.Linear(d_lat, d_hid), nn.ReLU(), nn.Linear(d_hid, d_in)
        )
        self.codebooks = nn.ParameterList(
            nn.Parameter(torch.zeros(config.codebook_size, d_lat))
            for _ in range(config.levels)
        )
        self.double()

    def codebook_stack(self) -> CodebookStack:
        return CodebookStack([cb.detach().numpy().copy() for cb in self.codebooks])


def training_losses(
    model: RqvaeModel,
    x: torch.Tensor,
    cf_batch: torch.Tensor | None = None,
    div_ctx: list[np.ndarray] | None = None,
    frozen: dict | None = None,
    capture: dict | None = None,
) -> dict[str, torch.Tensor]:
    """All loss terms for one batch, plus the weighted total.

    ``capture`` records the code assignment and every stop-gradient operand;
    passing the recorded dict back as ``frozen`` re-evaluates the loss as
    the exact function the backward pass differentiates, which is what the
    finite-difference gradient check probes.  ``div_ctx`` holds one
    positive-index array per level (drawn outside so the term stays a fixed
    differentiable function within a step).
    """
    cfg = model.config
    z = model.encoder(x)
    if frozen is not None:
        codes = frozen["codes"]
    else:
        codes = _assign_codes(z.detach().numpy(), model.codebook_stack())
    if capture is not None:
        capture["codes"] = codes

    r = z
    commit = None
    e_sum = None
    for level in range(cfg.levels):
        e = model.codebooks[level][codes[:, level]]
        sg_r = frozen["sg_r"][level] if frozen is not None else r.detach()
        sg_e = frozen["sg_e"][level] if frozen is not None else e.detach()
        if capture is not None:
            capture.setdefault("sg_r", []).append(sg_r.clone())
            capture.setdefault("sg_e", []).append(sg_e.clone())
        term = ((sg_r - e) ** 2).sum(dim=-1) + ((r - sg_e) ** 2).sum(dim=-1)
        commit = term if commit is None else commit + term
        e_sum = e if e_sum is None else e_sum + e
        r = r - e
    commit = commit.mean()

    st_offset = frozen["st"] if frozen is not None else (e_sum - z).detach()
    if capture is not None:
        capture["st"] = st_offset.clone()
    decoded = model.decoder(z + st_offset)
    recon = ((x - decoded) ** 2).sum(dim=-1).mean()

    losses = {"recon": recon, "commit": commit}
    total = recon + commit
    if cfg.cf_weight > 0.0 and cf_batch is not None:
        cf = collaborative_loss(e_sum, cf_batch, cfg.temperature)
        losses["cf"] = cf
        total = total + cfg.cf_weight * cf
    if cfg.div_weight > 0.0 and div_ctx is not None:
        div = None
        for level, positives in enumerate(div_ctx):
            cw = model.codebooks[level]
            logits = (cw @ cw.T) / cfg.temperature
            term = F.cross_entropy(logits, torch.as_tensor(positives))
            div = term if div is None else div + term
        losses["div"] = div
        total = total + cfg.div_weight * div
    losses["total"] = total
    return losses


def _build_div_ctx(model: RqvaeModel, cfg: RqvaeConfig, rng: np.random.Generator) -> list[np.ndarray]:
    ctx = []
    for level in range(cfg.levels):
        cw = model.codebooks[level].detach().numpy()
        k = min(cfg.div_clusters, cw.shape[0])
        clusters = balanced_kmeans(cw, k, rng)
        ctx.append(_draw_positives(clusters, rng))
    return ctx


def _init_codebooks(model: RqvaeModel, x: torch.Tensor, rng: np.random.Generator) -> None:
    """Seed each level's codebook with k-means centers of the residuals so far."""
    with torch.no_grad():
        residual = model.encoder(x).numpy()
    for level in range(model.config.levels):
        centers, labels = kmeans(residual, model.config.codebook_size, rng)
        with torch.no_grad():
            model.codebooks[level].copy_(torch.from_numpy(centers))
        residual = residual - centers[labels]


@dataclass
class RqvaeResult:
    model: RqvaeModel
    codebooks: CodebookStack
    id_map: IdentifierMap
    history: list[dict] = field(default_factory=list)


def train_rqvae(
    embeddings: dict[int, np.ndarray],
    config: RqvaeConfig,
    cf_embeddings: dict[int, np.ndarray] | None = None,
) -> RqvaeResult:
    """Train the quantizing autoencoder and emit the initial identifier map.

    Deterministic per ``config.seed``.  With ``cf_weight > 0`` the
    collaborative regularizer needs ``cf_embeddings`` at the latent
    dimension.  A non-finite loss aborts with a step diagnostic; codewords
    unused for a whole epoch are reseeded to a random batch residual.
    """
    item_ids = sorted(embeddings)
    n = len(item_ids)
    if n < config.codebook_size:
        raise ValueError(f"need at least {config.codebook_size} items, got {n}")
    x_all = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in item_ids])
    if x_all.shape[1] != config.input_dim:
        raise ValueError(
            f"embeddings have dim {x_all.shape[1]}, config expects {config.input_dim}"
        )
    h_all = None
    if config.cf_weight > 0.0:
        if cf_embeddings is None:
            raise ValueError("cf_weight > 0 requires cf_embeddings")
        h_all = np.stack([np.asarray(cf_embeddings[i], dtype=np.float64) for i in item_ids])
        if h_all.shape[1] != config.latent_dim:
            raise ValueError("cf embeddings must match the latent dimension")

    torch.manual_seed(derive_seed(config.seed, "rqvae", "init"))
    model = RqvaeModel(config)
    rng = np.random.default_rng(derive_seed(config.seed, "rqvae", "train"))
    x_t = torch.from_numpy(x_all)
    h_t = torch.from_numpy(h_all) if h_all is not None else None

    first = rng.permutation(n)[: config.batch_size]
    _init_codebooks(model, x_t[first], rng)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    history: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        div_ctx = _build_div_ctx(model, config, rng) if config.div_weight > 0.0 else None
        usage = np.zeros((config.levels, config.codebook_size), dtype=np.int64)
        residual_stash: list[np.ndarray] | None = None
        sums: dict[str, float] = {}
        n_steps = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb = x_t[idx]
            cb = h_t[idx] if h_t is not None else None
            losses = training_losses(model, xb, cb, div_ctx)
            total = losses["total"]
            if not torch.isfinite(total):
                parts = ", ".join(f"{k}={float(v):.4g}" for k, v in losses.items())
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} ({parts})"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for key, value in losses.items():
                sums[key] = sums.get(key, 0.0) + float(value)
            n_steps += 1
        # recompute assignments after the last step for usage stats / reseeding
        with torch.no_grad():
            latents = model.encoder(x_t).numpy()
        stack = model.codebook_stack()
        epoch_codes = _assign_codes(latents, stack)
        for level in range(config.levels):
            np.add.at(usage[level], epoch_codes[:, level], 1)
        residual_stash = _level_residuals(latents, stack, epoch_codes)
        dead = 0
        for level in range(config.levels):
            for code in np.flatnonzero(usage[level] == 0):
                pick = int(rng.integers(n))
                with torch.no_grad():
                    model.codebooks[level][code] = torch.from_numpy(
                        residual_stash[level][pick].copy()
                    )
                dead += 1
        if dead:
            log.info("epoch %d: reseeded %d dead codewords", epoch, dead)
        record = {"epoch": epoch}
        record.update({k: v / max(n_steps, 1) for k, v in sums.items()})
        history.append(record)

    stack = model.codebook_stack()
    with torch.no_grad():
        latents = model.encoder(x_t).numpy()
    codes = _assign_codes(latents, stack)
    source = "rqvae+letter" if (config.cf_weight > 0.0 or config.div_weight > 0.0) else "rqvae"
    entries = {
        item_id: tuple(level_token(level, int(codes[row, level])) for level in range(config.levels))
        for row, item_id in enumerate(item_ids)
    }
    id_map = IdentifierMap(entries=entries, version=0, source=source)
    return RqvaeResult(model=model, codebooks=stack, id_map=id_map, history=history)


def _level_residuals(
    latents: np.ndarray, codebooks: CodebookStack, codes: np.ndarray
) -> list[np.ndarray]:
    """Residuals entering each level, for dead-codeword reseeding."""
    r = latents.copy()
    stash = []
    for level, codebook in enumerate(codebooks.levels):
        stash.append(r.copy())
        r = r - codebook[codes[:, level]]
    return stash


def gradient_check(
    model: RqvaeModel,
    x: torch.Tensor,
    cf_batch: torch.Tensor | None = None,
    div_ctx: list[np.ndarray] | None = None,
    n_params: int = 10,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central finite differences.

    The finite-difference oracle evaluates the loss with the recorded code
    assignment and stop-gradient operands held fixed, i.e. exactly the
    function whose gradient the backward pass computes.
    """
    rng = rng or np.random.default_rng(0)
    capture: dict = {}
    losses = training_losses(model, x, cf_batch, div_ctx, capture=capture)
    model.zero_grad()
    losses["total"].backward()

    params = [p for p in model.parameters()]
    sizes = [p.numel() for p in params]
    total_size = sum(sizes)
    worst = 0.0
    for _ in range(n_params):
        flat = int(rng.integers(total_size))
        p_idx = 0
        while flat >= sizes[p_idx]:
            flat -= sizes[p_idx]
            p_idx += 1
        param = params[p_idx]
        analytic = float(param.grad.reshape(-1)[flat]) if param.grad is not None else 0.0
        with torch.no_grad():
            original = float(param.reshape(-1)[flat])
            param.reshape(-1)[flat] = original + step
            up = float(training_losses(model, x, cf_batch, div_ctx, frozen=capture)["total"])
            param.reshape(-1)[flat] = original - step
            down = float(training_losses(model, x, cf_batch, div_ctx, frozen=capture)["total"])
            param.reshape(-1)[flat] = original
        fd = (up - down) / (2.0 * step)
        err = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-3)
        worst = max(worst, err)
    return worst
