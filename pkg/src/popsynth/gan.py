"""Conditional tabular GAN over encoded population rows."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from .schema import RecordBatch
from .transforms import DataTransformer, gumbel_softmax

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 10
    pac: int = 10
    latent_dim: int = 128
    generator_dim: tuple = (512, 512, 512)
    discriminator_dim: tuple = (512, 512, 512)
    lr: float = 2e-4
    betas: tuple = (0.5, 0.9)
    tau: float = 0.2
    cond_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "generator_dim", tuple(self.generator_dim))
        object.__setattr__(self, "discriminator_dim", tuple(self.discriminator_dim))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 0 or self.batch_size < 1 or self.pac < 1:
            raise ValueError("epochs, batch_size and pac must be positive")
        if self.batch_size % self.pac:
            raise ValueError("batch_size must be divisible by pac")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class ConditionVector:
    column: int          # schema column index of the conditioned column
    category: int
    vector: np.ndarray = field(repr=False)


class ConditionSampler:
    """Draws conditions over the categorical columns of a training table.

    A column is picked uniformly; within it a category is picked with
    probability proportional to ``log(1 + count)`` for training, or to the
    raw count when generating.
    """

    def __init__(self, rows: np.ndarray, encoder: DataTransformer):
        if not encoder.cond_blocks_:
            raise ValueError("conditional sampling needs at least one categorical column")
        self.encoder = encoder
        self.blocks = encoder.cond_blocks_
        self.cond_dim = encoder.cond_dim_
        self.log_probs, self.freq_probs, self.members = [], [], []
        for b in self.blocks:
            col = rows[:, b.column].astype(int)
            counts = np.bincount(col, minlength=b.width).astype(float)
            lp = np.log1p(counts)
            self.log_probs.append(lp / lp.sum())
            self.freq_probs.append(counts / counts.sum())
            self.members.append([np.flatnonzero(col == c) for c in range(b.width)])

    def sample(self, n, rng, weighting="log"):
        """Return ``(cond matrix, block index per row, category per row)``."""
        which = rng.integers(len(self.blocks), size=n)
        probs = self.log_probs if weighting == "log" else self.freq_probs
        cats = np.empty(n, dtype=int)
        u = rng.random(n)
        for k, p in enumerate(probs):
            sel = which == k
            cats[sel] = np.minimum(np.searchsorted(np.cumsum(p), u[sel], side="right"),
                                   len(p) - 1)
        cond = np.zeros((n, self.cond_dim))
        starts = np.array([b.start for b in self.blocks])
        cond[np.arange(n), starts[which] + cats] = 1.0
        return cond, which, cats

    def sample_rows(self, which, cats, rng):
        """Indices of training rows matching each drawn condition."""
        out = np.empty(len(which), dtype=int)
        for i, (k, c) in enumerate(zip(which, cats)):
            pool = self.members[k][c]
            out[i] = pool[rng.integers(len(pool))]
        return out


def sample_condition(batch: RecordBatch, encoder: DataTransformer, rng) -> ConditionVector:
    sampler = ConditionSampler(np.asarray(batch.rows), encoder)
    cond, which, cats = sampler.sample(1, np.random.default_rng(rng))
    return ConditionVector(sampler.blocks[which[0]].column, int(cats[0]), cond[0])


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

class Generator:
    """Dense/batch-norm/ReLU blocks followed by per-block output heads."""

    def __init__(self, encoder: DataTransformer, latent_dim, hidden, rng):
        self.encoder = encoder
        self.latent_dim = latent_dim
        self.blocks = encoder.blocks_
        layers, width = [], latent_dim + encoder.cond_dim_
        for h in hidden:
            layers += [nn.Dense(width, h, rng), nn.BatchNorm(h), nn.ReLU()]
            width = h
        layers.append(nn.Dense(width, encoder.output_dim_, rng))
        self.net = nn.Sequential(layers)

    def forward(self, z, cond, tau, noise, train=True):
        """Return ``(activated output, raw pre-activation)``.

        ``noise`` holds Gumbel draws with the output's shape; only the
        softmax blocks read it.
        """
        raw = self.net.forward(np.concatenate([z, cond], axis=1), train)
        out = np.empty_like(raw)
        for b in self.blocks:
            sl = slice(b.start, b.stop)
            if b.is_softmax:
                out[:, sl] = gumbel_softmax(raw[:, sl], tau, noise=noise[:, sl])
            else:
                out[:, sl] = np.tanh(raw[:, sl])
        self._out, self._tau = out, tau
        return out, raw

    def backward(self, g_out, g_raw=None):
        out, tau = self._out, self._tau
        g = np.zeros_like(out) if g_raw is None else g_raw.copy()
        for b in self.blocks:
            sl = slice(b.start, b.stop)
            y, gy = out[:, sl], g_out[:, sl]
            if b.is_softmax:
                g[:, sl] += y * (gy - (gy * y).sum(axis=1, keepdims=True)) / tau
            else:
                g[:, sl] += gy * (1.0 - y * y)
        self.net.backward(g)


class Discriminator:
    """Packed critic: ``pac`` rows and their conditions judged jointly."""

    def __init__(self, data_dim, cond_dim, hidden, pac, rng):
        self.pac = pac
        self.row_dim = data_dim + cond_dim
        self.data_dim = data_dim
        layers, width = [], pac * self.row_dim
        for h in hidden:
            layers += [nn.Dense(width, h, rng), nn.LeakyReLU(0.2)]
            width = h
        layers.append(nn.Dense(width, 1, rng))
        self.net = nn.Sequential(layers)

    def logits(self, x, cond):
        if x.shape[0] % self.pac:
            raise ValueError(f"row count {x.shape[0]} is not a multiple of pac={self.pac}")
        inp = np.concatenate([x, cond], axis=1).reshape(-1, self.pac * self.row_dim)
        return self.net.forward(inp)[:, 0]

    def score(self, x, cond):
        """Probability in (0, 1) per pack that the pack is real."""
        return nn.sigmoid(np.clip(self.logits(x, cond), -30.0, 30.0))

    def backward(self, g_logits):
        g = self.net.backward(np.asarray(g_logits, dtype=float)[:, None])
        return g.reshape(-1, self.row_dim)[:, :self.data_dim]


def discriminator_forward(D: Discriminator, rows, conds):
    """Score one pack of exactly ``pac`` rows."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[0] != D.pac:
        raise ValueError(f"pack must contain exactly {D.pac} rows")
    return float(D.score(rows, np.asarray(conds, dtype=float))[0])


def generator_forward(G: Generator, z, cond, tau, rng=None, noise=None, train=False):
    z = np.atleast_2d(z)
    cond = np.atleast_2d(cond)
    if noise is None:
        noise = np.random.default_rng(rng).gumbel(size=(z.shape[0], G.encoder.output_dim_))
    out, _ = G.forward(z, cond, tau, np.atleast_2d(noise), train)
    return out[0] if out.shape[0] == 1 else out


def _cond_penalty(raw, G, cond_blocks, which, cats):
    """Mean cross-entropy between conditioned categories and their raw blocks."""
    n = raw.shape[0]
    loss, g = 0.0, np.zeros_like(raw)
    for k, cb in enumerate(cond_blocks):
        rows = np.flatnonzero(which == k)
        if rows.size == 0:
            continue
        ob = G.encoder.category_block(cb.column)
        logits = raw[rows, ob.start:ob.stop]
        lsm = nn.log_softmax(logits)
        loss -= lsm[np.arange(rows.size), cats[rows]].sum()
        p = np.exp(lsm)
        p[np.arange(rows.size), cats[rows]] -= 1.0
        g[rows, ob.start:ob.stop] = p
    return loss / n, g / n


def discriminator_loss_and_grads(G, D, z, cond, noise, real, tau):
    """``-[mean log D(real) + mean log(1 - D(fake))]``; sets D's grads.

    Real and fake packs go through the discriminator as one stacked batch.
    """
    fake, _ = G.forward(z, cond, tau, noise, train=True)
    s = D.logits(np.concatenate([real, fake]), np.concatenate([cond, cond]))
    h = s.size // 2
    s_real, s_fake = s[:h], s[h:]
    D.backward(np.concatenate([-nn.sigmoid(-s_real), nn.sigmoid(s_fake)]) / h)
    return float(nn.softplus(-s_real).mean() + nn.softplus(s_fake).mean())


def generator_loss_and_grads(G, D, z, cond, noise, which, cats, tau, cond_weight):
    """Non-saturating ``-mean log D(G(z))`` plus the condition penalty; fills G's grads."""
    fake, raw = G.forward(z, cond, tau, noise, train=True)
    s = D.logits(fake, cond)
    g_fake = D.backward(-nn.sigmoid(-s) / s.size)
    ce, g_raw = _cond_penalty(raw, G, G.encoder.cond_blocks_, which, cats)
    G.backward(g_fake, cond_weight * g_raw)
    return float(nn.softplus(-s).mean() + cond_weight * ce)


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    trace: list = field(default_factory=list)
    generator_steps: int = 0


def train(batch: RecordBatch, encoder: DataTransformer, cfg: TrainConfig,
          callback=None) -> TrainResult:
    """Alternating discriminator/generator updates for ``cfg.epochs`` epochs.

    Each epoch performs ``ceil(n / batch_size)`` steps. Returns the trained
    nets and a per-epoch trace of mean losses.
    """
    if len(batch) == 0:
        raise ValueError("training batch is empty")
    rng = np.random.default_rng(cfg.seed)
    init_rng = np.random.default_rng(rng.integers(2**63))
    G = Generator(encoder, cfg.latent_dim, cfg.generator_dim, init_rng)
    D = Discriminator(encoder.output_dim_, encoder.cond_dim_, cfg.discriminator_dim,
                      cfg.pac, init_rng)
    rows = np.asarray(batch.rows)
    data = encoder.transform(batch, "sample", np.random.default_rng(rng.integers(2**63)))
    sampler = ConditionSampler(rows, encoder)
    opt_g = nn.Adam([(p, g, k) for _, p, g, k in G.net.named_parameters()], cfg.lr, cfg.betas)
    opt_d = nn.Adam([(p, g, k) for _, p, g, k in D.net.named_parameters()], cfg.lr, cfg.betas)

    B, width = cfg.batch_size, encoder.output_dim_
    steps = math.ceil(len(batch) / B)
    result = TrainResult(G, D)
    for epoch in range(cfg.epochs):
        d_sum = g_sum = 0.0
        for step in range(steps):
            z = rng.standard_normal((B, cfg.latent_dim))
            cond, which, cats = sampler.sample(B, rng)
            real = data[sampler.sample_rows(which, cats, rng)]
            noise = rng.gumbel(size=(B, width))
            d_loss = discriminator_loss_and_grads(G, D, z, cond, noise, real, cfg.tau)
            opt_d.step()

            z = rng.standard_normal((B, cfg.latent_dim))
            cond, which, cats = sampler.sample(B, rng)
            noise = rng.gumbel(size=(B, width))
            g_loss = generator_loss_and_grads(G, D, z, cond, noise, which, cats,
                                              cfg.tau, cfg.cond_weight)
            opt_g.step()
            if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"d_loss={d_loss} g_loss={g_loss}")
            d_sum += d_loss
            g_sum += g_loss
            result.generator_steps += 1
        result.trace.append({"epoch": epoch + 1, "d_loss": d_sum / steps,
                             "g_loss": g_sum / steps, "steps": steps})
        if callback is not None:
            callback(result.trace[-1])
    return result


def sample_population(G: Generator, n: int, encoder: DataTransformer, sampler: ConditionSampler,
                      rng, tau: float = 0.2, id_prefix: str = "s") -> RecordBatch:
    """Draw ``n`` decoded rows with conditions at the training frequencies."""
    rng = np.random.default_rng(rng)
    schema = encoder.schema_
    if n == 0:
        return RecordBatch(schema, np.zeros((0, len(schema.columns))), ())
    z = rng.standard_normal((n, G.latent_dim))
    cond, _, _ = sampler.sample(n, rng, weighting="freq")
    noise = rng.gumbel(size=(n, encoder.output_dim_))
    out, _ = G.forward(z, cond, tau, noise, train=False)
    rows = encoder.inverse_transform(out)
    width = len(str(n - 1))
    return RecordBatch(schema, rows, tuple(f"{id_prefix}{i:0{width}d}" for i in range(n)))


class CTGANSynthesizer(BaseEstimator):
    """Estimator wrapper: ``fit`` a population table, then ``sample`` rows.

    Parameters mirror :class:`TrainConfig`; ``n_modes`` controls the
    mixture size of the internal :class:`DataTransformer`.
    """

    def __init__(self, epochs=300, batch_size=10, pac=10, latent_dim=128,
                 generator_dim=(512, 512, 512), discriminator_dim=(512, 512, 512),
                 lr=2e-4, betas=(0.5, 0.9), tau=0.2, cond_weight=1.0, n_modes=10,
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.pac = pac
        self.latent_dim = latent_dim
        self.generator_dim = generator_dim
        self.discriminator_dim = discriminator_dim
        self.lr = lr
        self.betas = betas
        self.tau = tau
        self.cond_weight = cond_weight
        self.n_modes = n_modes
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        p = self.get_params()
        p.pop("n_modes")
        p["seed"] = p.pop("random_state") or 0
        return TrainConfig(**p)

    def fit(self, X: RecordBatch, y=None, transformer: DataTransformer | None = None):
        if not isinstance(X, RecordBatch):
            raise TypeError("CTGANSynthesizer.fit expects a RecordBatch")
        if transformer is None:
            transformer = DataTransformer(n_modes=self.n_modes).fit(X)
        self.transformer_ = transformer
        res = train(X, transformer, self.train_config())
        self.generator_ = res.generator
        self.discriminator_ = res.discriminator
        self.loss_trace_ = res.trace
        self.generator_steps_ = res.generator_steps
        self.condition_sampler_ = ConditionSampler(np.asarray(X.rows), transformer)
        return self

    def sample(self, n, random_state=None) -> RecordBatch:
        check_is_fitted(self, "generator_")
        return sample_population(self.generator_, n, self.transformer_,
                                 self.condition_sampler_, random_state, tau=self.tau)

    # -- checkpoints -----------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "generator_")
        arrays = {f"G.{k}": v for k, v in self.generator_.net.state_dict().items()}
        arrays.update({f"D.{k}": v for k, v in self.discriminator_.net.state_dict().items()})
        for k, (lp, fp) in enumerate(zip(self.condition_sampler_.log_probs,
                                         self.condition_sampler_.freq_probs)):
            arrays[f"cond.{k}.log"] = lp
            arrays[f"cond.{k}.freq"] = fp
        meta = {"version": CHECKPOINT_VERSION, "params": self.get_params(),
                "transformer": self.transformer_.to_dict(),
                "transformer_sha256": self.transformer_.digest(),
                "config": asdict(self.train_config())}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "CTGANSynthesizer":
        with np.load(path) as f:
            arrays = {k: f[k] for k in f.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        params = meta["params"]
        params["generator_dim"] = tuple(params["generator_dim"])
        params["discriminator_dim"] = tuple(params["discriminator_dim"])
        params["betas"] = tuple(params["betas"])
        obj = cls(**params)
        enc = DataTransformer.from_dict(meta["transformer"])
        cfg = obj.train_config()
        rng = np.random.default_rng(0)
        G = Generator(enc, cfg.latent_dim, cfg.generator_dim, rng)
        D = Discriminator(enc.output_dim_, enc.cond_dim_, cfg.discriminator_dim, cfg.pac, rng)
        G.net.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("G.")})
        D.net.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("D.")})
        sampler = ConditionSampler.__new__(ConditionSampler)
        sampler.encoder = enc
        sampler.blocks = enc.cond_blocks_
        sampler.cond_dim = enc.cond_dim_
        sampler.log_probs = [arrays[f"cond.{k}.log"] for k in range(len(enc.cond_blocks_))]
        sampler.freq_probs = [arrays[f"cond.{k}.freq"] for k in range(len(enc.cond_blocks_))]
        sampler.members = None
        obj.transformer_, obj.generator_, obj.discriminator_ = enc, G, D
        obj.condition_sampler_ = sampler
        return obj
