"""Variational graph multiview CCA.

Each view gets a truncated-Krylov graph-convolutional encoder producing a
diagonal Gaussian per node. The view posteriors are fused as a product of
Gaussians, a latent sample is decoded back into every view by an MLP with
isotropic Gaussian noise, and pairs of latents reconstruct the batch graph
through a logistic inner-product link. Training maximizes

    sum_ij E[log p(A_ij | z_i, z_j)] + sum_i sum_m E[log p(x_m^i | z_i)] - sum_i KL(q_i || N(0, I))

over node batches, each with its own induced subgraph.

Tensors inside this module are sample-major (``batch x features``); the
numpy-facing ``embed`` returns the feature-major ``(d, n)`` layout used by
the rest of the package.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MultiviewDataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mvgcca-checkpoint"
CHECKPOINT_VERSION = 1
PSI_FLOOR = 1e-6


class TrainingFault(RuntimeError):
    """A forward pass or loss term produced non-finite values."""


class TrainingDiverged(TrainingFault):
    """Training hit a non-finite loss; ``model`` holds the last finite parameters."""

    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log


@dataclass
class TrainConfig:
    latent_dim: int = 3
    hops: int = 3
    layers: int = 4
    hidden: int = 1024
    decoder_layers: int = 4
    decoder_hidden: int = 1024
    batch_size: int = 512
    dropout: float = 0.5
    learning_rate: float = 1e-4
    epochs: int = 100
    seed: int = 0
    mc_samples: int = 1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    propagation: str = "sym"
    activation: str = "relu"
    link_weight: float = 1.0
    recon_weight: float = 1.0
    normalized_bernoulli: bool = False
    resample_per_view: bool = False
    logsigma_clamp: float = 6.0
    log_psi_init: float = 0.0
    embed_mode: str = "full"
    dtype: str = "float32"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        for name in ("latent_dim", "layers", "hidden", "decoder_layers", "decoder_hidden",
                     "batch_size", "mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hops < 0 or self.epochs < 0:
            raise ValueError("hops and epochs must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.propagation not in ("none", "sym", "rw"):
            raise ValueError(f"unknown propagation {self.propagation!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.embed_mode not in ("full", "tiled"):
            raise ValueError(f"unknown embed_mode {self.embed_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_ACTIVATIONS = {"relu": F.relu, "tanh": torch.tanh}


def _dropout(h, p, generator):
    if p == 0.0:
        return h
    keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= p
    return h * keep / (1.0 - p)


def _he_uniform(layer: nn.Linear):
    nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
    nn.init.zeros_(layer.bias)


def _fan_in_uniform(layer: nn.Linear):
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.zeros_(layer.bias)


class KrylovEncoder(nn.Module):
    """Stack of truncated-Krylov layers followed by mean and log-scale heads.

    Layer ``l`` maps ``[H, PH, ..., P^hops H]`` (concatenated along features)
    through a dense layer and the nonlinearity.
    """

    def __init__(self, in_dim, latent_dim, hops=3, layers=4, hidden=1024, activation="relu"):
        super().__init__()
        self.hops = hops
        self.activation = activation
        widths = [in_dim] + [hidden] * layers
        self.layers = nn.ModuleList(
            nn.Linear((hops + 1) * w_in, w_out) for w_in, w_out in zip(widths, widths[1:])
        )
        self.head_mu = nn.Linear(hidden, latent_dim)
        self.head_logsigma = nn.Linear(hidden, latent_dim)
        for layer in self.layers:
            _he_uniform(layer)
        _fan_in_uniform(self.head_mu)
        _fan_in_uniform(self.head_logsigma)


class GaussianDecoder(nn.Module):
    """MLP mean with isotropic noise ``psi = exp(log_psi)**2 + 1e-6``."""

    def __init__(self, latent_dim, out_dim, layers=4, hidden=1024, activation="relu", log_psi_init=0.0):
        super().__init__()
        self.activation = activation
        widths = [latent_dim] + [hidden] * layers
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths, widths[1:]))
        self.head_mu = nn.Linear(hidden, out_dim)
        self.log_psi = nn.Parameter(torch.tensor(float(log_psi_init)))
        for layer in self.layers:
            _he_uniform(layer)
        _fan_in_uniform(self.head_mu)

    @property
    def psi(self):
        return torch.exp(self.log_psi) ** 2 + PSI_FLOOR

    def mean(self, z, dropout=0.0, generator=None):
        act = _ACTIVATIONS[self.activation]
        h = z
        for layer in self.layers:
            h = _dropout(act(layer(h)), dropout, generator)
        return self.head_mu(h)


class MVGCCA(nn.Module):
    """All trainable parameters: one encoder and one decoder per view."""

    def __init__(self, dims, config: TrainConfig):
        super().__init__()
        self.dims = tuple(int(d) for d in dims)
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoders = nn.ModuleList(
                KrylovEncoder(d, config.latent_dim, config.hops, config.layers,
                              config.hidden, config.activation)
                for d in self.dims
            )
            self.decoders = nn.ModuleList(
                GaussianDecoder(config.latent_dim, d, config.decoder_layers,
                                config.decoder_hidden, config.activation, config.log_psi_init)
                for d in self.dims
            )
        self.to(config.torch_dtype)


@dataclass
class PosteriorGaussians:
    mu: list[torch.Tensor]
    logsigma: list[torch.Tensor]
    fused_mu: torch.Tensor | None = None
    fused_logsigma: torch.Tensor | None = None


def propagation_tensor(A, kind="sym"):
    """Dense torch version of the graph propagation operator for a batch adjacency."""
    if kind == "none":
        return A
    deg = A.sum(dim=1)
    if kind == "rw":
        return A / deg[:, None]
    dinv = deg.rsqrt()
    return dinv[:, None] * A * dinv[None, :]


def encode_view(encoder: KrylovEncoder, x, prop, dropout=0.0, generator=None, clamp=6.0):
    """Per-node ``(mu, logsigma)`` for one view; ``x`` is ``batch x d_m``.

    ``prop`` is the batch propagation operator (dense or sparse tensor).
    Dropout follows every hidden nonlinearity, never the heads.
    """
    if x.shape[0] != prop.shape[0]:
        raise ValueError(
            f"{x.shape[0]} feature rows do not match a graph of {prop.shape[0]} nodes"
        )
    act = _ACTIVATIONS[encoder.activation]
    h = x
    for layer in encoder.layers:
        blocks = [h]
        for _ in range(encoder.hops):
            blocks.append(prop @ blocks[-1])
        h = _dropout(act(layer(torch.cat(blocks, dim=1))), dropout, generator)
    mu = encoder.head_mu(h)
    logsigma = encoder.head_logsigma(h)
    if clamp is not None:
        logsigma = logsigma.clamp(-clamp, clamp)
    if not (torch.isfinite(mu).all() and torch.isfinite(logsigma).all()):
        raise TrainingFault(
            f"encoder produced non-finite output (input finite: {bool(torch.isfinite(x).all())}, "
            f"max |h| = {h.abs().max().item():.3g})"
        )
    return mu, logsigma


def fuse_posteriors(mus, logsigmas):
    """Product of diagonal Gaussians: precisions add, means are precision-weighted.

    Computed in log space so a view with huge variance simply drops out.
    """
    log_prec = torch.stack([-2.0 * ls for ls in logsigmas])
    total = torch.logsumexp(log_prec, dim=0)
    weights = torch.exp(log_prec - total)
    fused_mu = (weights * torch.stack(list(mus))).sum(dim=0)
    return fused_mu, -0.5 * total


def sample_latent(mu, logsigma, generator=None):
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(logsigma) * eps


def decode_view_loglik(decoder: GaussianDecoder, z, x, dropout=0.0, generator=None):
    """Per-sample ``log N(x; decoder(z), psi I)``."""
    resid = x - decoder.mean(z, dropout, generator)
    psi = decoder.psi
    dm = x.shape[1]
    return -0.5 * dm * torch.log(2 * math.pi * psi) - (resid * resid).sum(dim=1) / (2 * psi)


def _log_cb_normalizer(logits):
    # continuous-Bernoulli constant C(sigmoid(s)) = s / tanh(s / 2)
    u = 0.5 * logits
    small = u.abs() < 1e-3
    safe = torch.where(small, torch.ones_like(u), u)
    exact = torch.log(2 * safe / torch.tanh(safe))
    taylor = math.log(2.0) + torch.log1p(u * u / 3.0)
    return torch.where(small, taylor, exact)


def link_loglik(logits, a, normalized=False):
    """Elementwise ``a log sigmoid(s) + (1 - a) log(1 - sigmoid(s))``."""
    out = a * F.logsigmoid(logits) + (1 - a) * F.logsigmoid(-logits)
    if normalized:
        out = out + _log_cb_normalizer(logits)
    return out


def decode_link_loglik(z_i, z_j, a, normalized=False) -> float:
    """Link log-likelihood of weight ``a`` in [0, 1] between two latent vectors."""
    if not 0.0 <= float(a) <= 1.0:
        raise ValueError(f"edge weight {a} outside [0, 1]")
    z_i = torch.as_tensor(z_i, dtype=torch.float64)
    z_j = torch.as_tensor(z_j, dtype=torch.float64)
    s = torch.dot(z_i, z_j)
    return float(link_loglik(s, torch.tensor(float(a), dtype=torch.float64), normalized))


def kl_fused_vs_prior(mu, logsigma):
    """Per-sample KL from ``N(mu, diag(exp(logsigma)^2))`` to the standard normal."""
    return 0.5 * (mu * mu + torch.exp(2 * logsigma) - 1.0 - 2.0 * logsigma).sum(dim=-1)


def posterior(model: MVGCCA, xs, prop, dropout=0.0, generator=None) -> PosteriorGaussians:
    clamp = model.config.logsigma_clamp
    mus, lss = [], []
    for enc, x in zip(model.encoders, xs):
        mu, ls = encode_view(enc, x, prop, dropout, generator, clamp)
        mus.append(mu)
        lss.append(ls)
    fmu, fls = fuse_posteriors(mus, lss)
    return PosteriorGaussians(mus, lss, fmu, fls)


def elbo_batch(model: MVGCCA, xs, A_sub, generator=None, training=True):
    """``(-ELBO, terms)`` for one batch.

    ``xs`` are the batch rows of every view, ``A_sub`` the dense batch
    adjacency. Expectations use ``mc_samples`` reparameterized draws from the
    fused posterior; one draw serves the link term and every view unless
    ``resample_per_view`` is set. ``terms`` holds the summed link,
    reconstruction and KL values (unweighted) plus per-view reconstructions.
    """
    cfg = model.config
    drop = cfg.dropout if training else 0.0
    prop = propagation_tensor(A_sub, cfg.propagation)
    post = posterior(model, xs, prop, drop, generator)

    link = torch.zeros((), dtype=A_sub.dtype)
    recon_views = [torch.zeros((), dtype=A_sub.dtype) for _ in xs]
    for _ in range(cfg.mc_samples):
        z = sample_latent(post.fused_mu, post.fused_logsigma, generator)
        link = link + link_loglik(z @ z.T, A_sub, cfg.normalized_bernoulli).sum()
        for m, (dec, x) in enumerate(zip(model.decoders, xs)):
            zm = sample_latent(post.fused_mu, post.fused_logsigma, generator) if (
                cfg.resample_per_view and m > 0) else z
            recon_views[m] = recon_views[m] + decode_view_loglik(dec, zm, x, drop, generator).sum()
    link = link / cfg.mc_samples
    recon_views = [r / cfg.mc_samples for r in recon_views]
    recon = torch.stack(recon_views).sum()
    kl = kl_fused_vs_prior(post.fused_mu, post.fused_logsigma).sum()

    for name, value in (("link", link), ("reconstruction", recon), ("kl", kl)):
        if not torch.isfinite(value):
            raise TrainingFault(f"non-finite {name} term in the ELBO ({value.item()})")
    elbo = cfg.link_weight * link + cfg.recon_weight * recon - kl
    terms = {
        "link": link.item(),
        "reconstruction": recon.item(),
        "kl": kl.item(),
        "elbo": elbo.item(),
        "reconstruction_per_view": [r.item() for r in recon_views],
    }
    return -elbo, terms


def _view_tensors(dataset: MultiviewDataset, dtype):
    return [torch.as_tensor(np.ascontiguousarray(v.T), dtype=dtype) for v in dataset.views]


def _batch_adjacency(adjacency, idx, dtype):
    sub = adjacency.weights[idx][:, idx]
    return torch.as_tensor(sub.toarray(), dtype=dtype)


def _check_ready(dataset: MultiviewDataset):
    if dataset.adjacency is None:
        raise ValueError("dataset has no adjacency; build and normalize a graph first")
    diag = dataset.adjacency.weights.diagonal()
    if not np.allclose(diag, 1.0):
        raise ValueError("adjacency must be normalized (unit diagonal) before training")


def train(dataset: MultiviewDataset, config: TrainConfig, model: MVGCCA | None = None, callback=None):
    """Fit the model with Adam over shuffled node batches.

    Each batch uses the subgraph induced by its nodes. The optimizer
    minimizes -ELBO divided by the batch size. Returns ``(model, log)`` with
    one log record per epoch. Randomness (batch order, dropout masks, latent
    draws) comes from one generator seeded with ``config.seed``: for every
    epoch a permutation is drawn first, then batches are consumed in order.
    """
    _check_ready(dataset)
    dtype = config.torch_dtype
    if model is None:
        model = MVGCCA(dataset.dims, config)
    elif model.dims != dataset.dims:
        raise ValueError(f"model dims {model.dims} do not match dataset dims {dataset.dims}")
    xs = _view_tensors(dataset, dtype)
    n = dataset.n
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps
    )
    log = []
    model.train()
    for epoch in range(config.epochs):
        snapshot = copy.deepcopy(model.state_dict())
        start = time.perf_counter()
        perm = torch.randperm(n, generator=gen).numpy()
        totals = {"link": 0.0, "reconstruction": 0.0, "kl": 0.0, "elbo": 0.0}
        step_seconds = []
        for lo in range(0, n, config.batch_size):
            step_start = time.perf_counter()
            idx = perm[lo : lo + config.batch_size]
            A_sub = _batch_adjacency(dataset.adjacency, idx, dtype)
            batch = [x[idx] for x in xs]
            opt.zero_grad()
            try:
                loss, terms = elbo_batch(model, batch, A_sub, gen, training=True)
            except TrainingFault as err:
                model.load_state_dict(snapshot)
                raise TrainingDiverged(
                    f"epoch {epoch}: {err}; parameters restored to the start of the epoch",
                    model=model, log=log,
                ) from err
            (loss / len(idx)).backward()
            opt.step()
            step_seconds.append(time.perf_counter() - step_start)
            for key in totals:
                totals[key] += terms[key]
        record = {"epoch": epoch, **totals, "seconds": time.perf_counter() - start,
                  "step_seconds": step_seconds, "seed": config.seed}
        log.append(record)
        logger.debug("epoch %d: %s", epoch, record)
        if callback is not None:
            callback(model, record)
    model.eval()
    return model, log


@torch.no_grad()
def embed(model: MVGCCA, dataset: MultiviewDataset, mode=None, return_posterior=False):
    """Fused posterior means, shape ``(d, n)``, with dropout off.

    ``mode="full"`` propagates over the whole graph (sparse); ``"tiled"``
    encodes consecutive blocks of ``batch_size`` nodes with their induced
    subgraphs, mirroring training.
    """
    _check_ready(dataset)
    cfg = model.config
    mode = mode or cfg.embed_mode
    dtype = cfg.torch_dtype
    was_training = model.training
    model.eval()
    xs = _view_tensors(dataset, dtype)
    if mode == "full":
        blocks = [np.arange(dataset.n)]
    else:
        blocks = [np.arange(lo, min(lo + cfg.batch_size, dataset.n))
                  for lo in range(0, dataset.n, cfg.batch_size)]
    mus, per_view = [], [[] for _ in xs]
    for idx in blocks:
        prop = _sparse_propagation(dataset.adjacency.weights[idx][:, idx], cfg.propagation, dtype)
        post = posterior(model, [x[idx] for x in xs], prop)
        mus.append(post.fused_mu)
        for m, mu in enumerate(post.mu):
            per_view[m].append(mu)
    model.train(was_training)
    Z = torch.cat(mus).T.numpy().astype(np.float64)
    if return_posterior:
        return Z, [torch.cat(p).T.numpy().astype(np.float64) for p in per_view]
    return Z


def _sparse_propagation(W, kind, dtype):
    W = W.tocsr()
    deg = np.asarray(W.sum(axis=1)).ravel()
    if kind == "sym":
        dinv = 1.0 / np.sqrt(deg)
        W = W.multiply(dinv[:, None]).multiply(dinv[None, :]).tocsr()
    elif kind == "rw":
        W = W.multiply(1.0 / deg[:, None]).tocsr()
    if W.shape[0] <= 4096:
        return torch.as_tensor(W.toarray(), dtype=dtype)
    coo = W.tocoo()
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.int64)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(coo.data, dtype=dtype), W.shape).coalesce()


def save_checkpoint(path, model: MVGCCA, names=None, extra=None):
    """Write parameters (named by view, layer and role) plus the TrainConfig."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dims": list(model.dims),
        "names": list(names) if names is not None else None,
        "extra": extra or {},
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Return ``(model, payload)``; ``payload`` carries the stored metadata."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an MVGCCA checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = TrainConfig.from_dict(payload["config"])
    model = MVGCCA(payload["dims"], config)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload
