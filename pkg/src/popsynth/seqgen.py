"""Next-location model over activity chains.

Architecture: token embedding, two stacked LSTM layers, and an additive
attention layer reading the concatenated per-step features (embedding,
layer-1 and layer-2 outputs). The next-token logits are computed from the
attention context together with the current step's features. Attention is
causal so every position of a chain is a training target.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .nn import Adam, log_softmax, sigmoid
from .schema import TokenVocabulary, TrajectorySeq, build_vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAX_RESAMPLE = 100


@dataclass(frozen=True)
class PaddedBatch:
    tokens: np.ndarray   # (n, n_max + 2): BOS, chain, EOS, PAD...
    mask: np.ndarray     # (n, n_max + 1): True where tokens[:, 1:] is a target

    @property
    def inputs(self):
        return self.tokens[:, :-1]

    @property
    def targets(self):
        return self.tokens[:, 1:]


def pad_and_mask(trajs, vocab: TokenVocabulary, n_max: int) -> PaddedBatch:
    out = np.full((len(trajs), n_max + 2), vocab.pad, dtype=np.int64)
    for i, t in enumerate(trajs):
        toks = t.tokens if isinstance(t, TrajectorySeq) else tuple(t)
        if len(toks) > n_max:
            raise ValueError(f"sequence of length {len(toks)} exceeds n_max={n_max}")
        out[i, 0] = vocab.bos
        out[i, 1:len(toks) + 1] = vocab.encode(toks)
        out[i, len(toks) + 1] = vocab.eos
    return PaddedBatch(out, out[:, 1:] != vocab.pad)


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    max_len: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must lie in [0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@njit(cache=True)
def _lstm_forward_kernel(ax, Wh):
    B, T, H4 = ax.shape
    H = H4 // 4
    hs = np.zeros((B, T, H))
    cs = np.zeros((B, T, H))
    gates = np.empty((B, T, H4))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = np.dot(h, Wh)
        for b in range(B):
            for j in range(H):
                gi = 1.0 / (1.0 + np.exp(-(a[b, j] + ax[b, t, j])))
                gf = 1.0 / (1.0 + np.exp(-(a[b, H + j] + ax[b, t, H + j])))
                gg = np.tanh(a[b, 2 * H + j] + ax[b, t, 2 * H + j])
                go = 1.0 / (1.0 + np.exp(-(a[b, 3 * H + j] + ax[b, t, 3 * H + j])))
                c[b, j] = gf * c[b, j] + gi * gg
                h[b, j] = go * np.tanh(c[b, j])
                gates[b, t, j] = gi
                gates[b, t, H + j] = gf
                gates[b, t, 2 * H + j] = gg
                gates[b, t, 3 * H + j] = go
                hs[b, t, j] = h[b, j]
                cs[b, t, j] = c[b, j]
    return hs, cs, gates


@njit(cache=True)
def _lstm_backward_kernel(gates, cs, dhs, WhT):
    B, T, H4 = gates.shape
    H = H4 // 4
    da = np.empty((B, T, H4))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dat = np.empty((B, H4))
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                gi = gates[b, t, j]
                gf = gates[b, t, H + j]
                gg = gates[b, t, 2 * H + j]
                go = gates[b, t, 3 * H + j]
                c_prev = cs[b, t - 1, j] if t > 0 else 0.0
                tc = np.tanh(cs[b, t, j])
                dh = dhs[b, t, j] + dh_next[b, j]
                dc = dc_next[b, j] + dh * go * (1.0 - tc * tc)
                dat[b, j] = dc * gg * gi * (1.0 - gi)
                dat[b, H + j] = dc * c_prev * gf * (1.0 - gf)
                dat[b, 2 * H + j] = dc * gi * (1.0 - gg * gg)
                dat[b, 3 * H + j] = dh * tc * go * (1.0 - go)
                dc_next[b, j] = dc * gf
        da[:, t, :] = dat
        dh_next = np.dot(dat, WhT)
    return da


def _glorot(rng, n_in, n_out):
    bound = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class SeqModel:
    """Parameters and forward/backward passes of the sequence model."""

    PARAM_NAMES = ("E", "Wx1", "Wh1", "b1", "Wx2", "Wh2", "b2",
                   "Wa", "ba", "va", "Wo", "bo")

    def __init__(self, vocab: TokenVocabulary, embedding_dim=100, hidden_dim=128,
                 attention_dim=64, rng=None):
        rng = np.random.default_rng(rng)
        V, de, dh, da = len(vocab), embedding_dim, hidden_dim, attention_dim
        df = de + 2 * dh
        self.vocab = vocab
        self.dims = {"embedding_dim": de, "hidden_dim": dh, "attention_dim": da}
        b = np.zeros(4 * dh)
        b[dh:2 * dh] = 1.0      # forget gate
        self.params = {
            "E": rng.uniform(-0.05, 0.05, size=(V, de)),
            "Wx1": _glorot(rng, de, 4 * dh), "Wh1": _glorot(rng, dh, 4 * dh), "b1": b.copy(),
            "Wx2": _glorot(rng, dh, 4 * dh), "Wh2": _glorot(rng, dh, 4 * dh), "b2": b.copy(),
            "Wa": _glorot(rng, df, da), "ba": np.zeros(da), "va": rng.uniform(-0.05, 0.05, da),
            "Wo": _glorot(rng, 2 * df, V), "bo": np.zeros(V),
        }

    @property
    def feature_dim(self):
        return self.dims["embedding_dim"] + 2 * self.dims["hidden_dim"]

    # -- forward ---------------------------------------------------------

    def _lstm(self, xs, Wx, Wh, b):
        """Run one layer over (B, T, d_in); returns outputs and a cache."""
        B, T, _ = xs.shape
        ax = (xs.reshape(B * T, -1) @ Wx).reshape(B, T, -1) + b
        hs, cs, gates = _lstm_forward_kernel(np.ascontiguousarray(ax),
                                             np.ascontiguousarray(Wh))
        return hs, (cs, gates)

    def _features(self, X):
        p = self.params
        emb = p["E"][X]
        h1, c1 = self._lstm(emb, p["Wx1"], p["Wh1"], p["b1"])
        h2, c2 = self._lstm(h1, p["Wx2"], p["Wh2"], p["b2"])
        F = np.concatenate([emb, h1, h2], axis=2)
        return F, (emb, h1, c1, h2, c2)

    def _attend(self, F):
        p = self.params
        T = F.shape[1]
        U = np.tanh(F @ p["Wa"] + p["ba"])
        s = U @ p["va"]                                  # (B, T)
        causal = np.tril(np.ones((T, T), dtype=bool))
        S = np.where(causal, s[:, None, :], -np.inf)     # (B, Tq, Tk)
        S = S - S.max(axis=2, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=2, keepdims=True)
        ctx = A @ F
        Q = np.concatenate([ctx, F], axis=2)
        return Q @ p["Wo"] + p["bo"], (U, A, Q)

    def logits(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.int64))
        if X.size and (X.min() < 0 or X.max() >= len(self.vocab)):
            raise IndexError("token index outside the vocabulary")
        F, _ = self._features(X)
        out, _ = self._attend(F)
        return out

    # -- loss and gradients ---------------------------------------------

    def loss_and_grads(self, X, Y, mask, denom=None):
        """Masked next-token cross-entropy and its parameter gradients.

        The summed token loss is divided by ``denom``, which defaults to the
        number of unmasked tokens (a per-token mean).
        """
        p = self.params
        X = np.asarray(X, dtype=np.int64)
        B, T = X.shape
        de, dh = self.dims["embedding_dim"], self.dims["hidden_dim"]
        df = self.feature_dim
        F, (emb, h1, c1, h2, c2) = self._features(X)
        Z, (U, A, Q) = self._attend(F)
        m = mask.astype(float)
        n_valid = float(denom) if denom else max(m.sum(), 1.0)
        lsm = log_softmax(Z, axis=2)
        loss = -(np.take_along_axis(lsm, Y[..., None], axis=2)[..., 0] * m).sum() / n_valid

        g = {}
        dZ = np.exp(lsm)
        np.put_along_axis(dZ, Y[..., None],
                          np.take_along_axis(dZ, Y[..., None], axis=2) - 1.0, axis=2)
        dZ *= (m / n_valid)[..., None]
        Qf = Q.reshape(B * T, -1)
        dZf = dZ.reshape(B * T, -1)
        g["Wo"] = Qf.T @ dZf
        g["bo"] = dZf.sum(axis=0)
        dQ = (dZf @ p["Wo"].T).reshape(B, T, 2 * df)
        dctx, dF = dQ[..., :df], dQ[..., df:].copy()
        dA = dctx @ F.transpose(0, 2, 1)
        dF += A.transpose(0, 2, 1) @ dctx
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True))
        ds = dS.sum(axis=1)                               # (B, Tk)
        g["va"] = np.einsum("bt,bta->a", ds, U)
        dP = ds[..., None] * p["va"] * (1.0 - U * U)
        dPf = dP.reshape(B * T, -1)
        g["Wa"] = F.reshape(B * T, -1).T @ dPf
        g["ba"] = dPf.sum(axis=0)
        dF += dP @ p["Wa"].T

        demb = dF[..., :de].copy()
        dh1 = dF[..., de:de + dh].copy()
        dh2 = dF[..., de + dh:]
        dx2, g["Wx2"], g["Wh2"], g["b2"] = self._lstm_backward(
            h1, h2, c2, dh2, p["Wx2"], p["Wh2"])
        dh1 += dx2
        dx1, g["Wx1"], g["Wh1"], g["b1"] = self._lstm_backward(
            emb, h1, c1, dh1, p["Wx1"], p["Wh1"])
        demb += dx1
        dE = np.zeros_like(p["E"])
        np.add.at(dE, X.ravel(), demb.reshape(B * T, de))
        g["E"] = dE
        return float(loss), g

    @staticmethod
    def _lstm_backward(xs, hs, cache, dhs, Wx, Wh):
        cs, gates = cache
        B, T, _ = xs.shape
        H = Wh.shape[0]
        da = _lstm_backward_kernel(gates, cs, np.ascontiguousarray(dhs),
                                   np.ascontiguousarray(Wh.T))
        daf = da.reshape(B * T, -1)
        h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
        dWh = h_prev.reshape(B * T, -1).T @ daf
        dWx = xs.reshape(B * T, -1).T @ daf
        db = daf.sum(axis=0)
        dx = (daf @ Wx.T).reshape(B, T, -1)
        return dx, dWx, dWh, db

    # -- incremental decoding --------------------------------------------

    def _step(self, state, tokens):
        """Advance ``n`` parallel sequences by one token; returns logits."""
        p = self.params
        dh = self.dims["hidden_dim"]
        e = p["E"][tokens]
        x = e
        new = []
        hs = []
        for layer, (h, c) in zip((1, 2), state["lstm"]):
            a = x @ p[f"Wx{layer}"] + h @ p[f"Wh{layer}"] + p[f"b{layer}"]
            gi, gf = sigmoid(a[:, :dh]), sigmoid(a[:, dh:2 * dh])
            gg, go = np.tanh(a[:, 2 * dh:3 * dh]), sigmoid(a[:, 3 * dh:])
            c = gf * c + gi * gg
            h = go * np.tanh(c)
            new.append((h, c))
            hs.append(h)
            x = h
        state["lstm"] = new
        Ft = np.concatenate([e, hs[0], hs[1]], axis=1)
        st = np.tanh(Ft @ p["Wa"] + p["ba"]) @ p["va"]
        state["F"].append(Ft)
        state["s"].append(st)
        S = np.stack(state["s"], axis=1)
        S = np.exp(S - S.max(axis=1, keepdims=True))
        S /= S.sum(axis=1, keepdims=True)
        ctx = np.einsum("nt,ntd->nd", S, np.stack(state["F"], axis=1))
        return np.concatenate([ctx, Ft], axis=1) @ p["Wo"] + p["bo"]

    def _init_state(self, n):
        dh = self.dims["hidden_dim"]
        z = np.zeros((n, dh))
        return {"lstm": [(z, z), (z, z)], "F": [], "s": []}

    # -- persistence -----------------------------------------------------

    def save(self, path, extra=None):
        meta = {"version": CHECKPOINT_VERSION, "dims": self.dims,
                "vocab": list(self.vocab.zone_tokens), "extra": extra or {}}
        arrays = dict(self.params)
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            arrays = {k: f[k] for k in f.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        model = cls(TokenVocabulary(meta["vocab"]), **meta["dims"], rng=0)
        model.params = {k: np.array(arrays[k], dtype=float) for k in cls.PARAM_NAMES}
        return model, meta["extra"]


def seq_forward(model: SeqModel, prefix) -> np.ndarray:
    """Next-token distribution after ``prefix`` (token indices, starting at BOS)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.size == 0:
        raise ValueError("prefix must be a non-empty 1-D index sequence")
    z = model.logits(prefix[None, :])[0, -1]
    return np.exp(log_softmax(z))


@dataclass
class SeqTrainConfig:
    epochs: int = 300
    batch_size: int = 10
    lr: float = 2e-3
    clip_norm: float = 5.0
    holdout: float = 0.1
    embedding_dim: int = 100
    hidden_dim: int = 128
    attention_dim: int = 64
    n_max: int = 4
    seed: int = 0
    restore_best: bool = False      # keep the parameters with the lowest holdout loss
    patience: int | None = None     # stop after this many epochs without holdout gain
    ema: float | None = 0.999       # parameter averaging decay; None disables


@dataclass
class SeqTrainResult:
    model: SeqModel
    trace: list = field(default_factory=list)
    best_epoch: int | None = None


def train_seq(trajs, cfg: SeqTrainConfig, vocab: TokenVocabulary | None = None,
              callback=None) -> SeqTrainResult:
    """Fit the model by Adam on masked next-token cross-entropy.

    A ``holdout`` fraction of chains is kept aside and its loss reported in
    the per-epoch trace. With ``restore_best`` the returned model carries
    the parameters from the epoch with the lowest holdout loss, and
    ``patience`` ends training early once that loss stops improving. With
    ``ema`` an exponential moving average of the parameters is tracked; it
    is what gets evaluated on the holdout and returned, which removes most
    of the step-to-step jitter of small-batch Adam.
    """
    if not trajs:
        raise ValueError("training corpus is empty")
    vocab = vocab or build_vocabulary(trajs)
    rng = np.random.default_rng(cfg.seed)
    model = SeqModel(vocab, cfg.embedding_dim, cfg.hidden_dim, cfg.attention_dim,
                     rng=rng.integers(2**63))
    pb = pad_and_mask(trajs, vocab, cfg.n_max)
    order = rng.permutation(len(trajs))
    n_hold = int(round(cfg.holdout * len(trajs))) if len(trajs) > 1 else 0
    hold, fit_idx = order[:n_hold], order[n_hold:]
    Xi, Yi, Mi = pb.inputs, pb.targets, pb.mask
    # Each batch's summed loss is divided by a constant (batch size times the
    # mean chain token count) rather than its own token count. Normalising
    # per batch would upweight batches of short chains and bias the learned
    # stop probabilities upwards.
    tokens_per_seq = float(Mi[fit_idx].sum()) / max(len(fit_idx), 1)

    grads = {}
    opt = Adam([(model.params, grads, k) for k in SeqModel.PARAM_NAMES],
               lr=cfg.lr, betas=(0.9, 0.999), clip_norm=cfg.clip_norm)
    result = SeqTrainResult(model)
    best, best_params = math.inf, None
    avg = {k: v.copy() for k, v in model.params.items()} if cfg.ema else None
    steps = 0
    for epoch in range(cfg.epochs):
        perm = fit_idx[rng.permutation(len(fit_idx))]
        total, count = 0.0, 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            denom = len(idx) * tokens_per_seq
            loss, g = model.loss_and_grads(Xi[idx], Yi[idx], Mi[idx], denom)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite sequence loss at epoch {epoch}")
            grads.update(g)
            opt.step()
            if avg is not None:
                # warm-up schedule so short runs are not dominated by the init
                steps += 1
                d = min(cfg.ema, (1.0 + steps) / (10.0 + steps))
                for k, v in avg.items():
                    v *= d
                    v += (1.0 - d) * model.params[k]
            total += loss * denom
            count += float(Mi[idx].sum())
        entry = {"epoch": epoch + 1, "train_loss": total / max(count, 1)}
        if n_hold:
            with _swapped(model, avg):
                entry["holdout_loss"] = model.loss_and_grads(Xi[hold], Yi[hold], Mi[hold])[0]
        result.trace.append(entry)
        if callback is not None:
            callback(entry)
        if n_hold:
            if entry["holdout_loss"] < best:
                best, result.best_epoch = entry["holdout_loss"], epoch + 1
                if cfg.restore_best:
                    best_params = {k: v.copy() for k, v in (avg or model.params).items()}
            elif cfg.patience is not None and epoch + 1 - result.best_epoch >= cfg.patience:
                break
    final = best_params if best_params is not None else avg
    if final is not None:
        for k, v in final.items():
            np.copyto(model.params[k], v)
    return result


@contextmanager
def _swapped(model, params):
    """Temporarily evaluate ``model`` with ``params`` in place of its own."""
    if params is None:
        yield
        return
    saved = model.params
    model.params = params
    try:
        yield
    finally:
        model.params = saved


def sample_trajectories(model: SeqModel, n: int, cfg: SamplerConfig, rng=None,
                        id_prefix: str = "t") -> list[TrajectorySeq]:
    """Autoregressively draw ``n`` chains of 1..``max_len`` zone tokens.

    Temperature 0 decodes greedily. PAD and BOS are never emitted; an EOS as
    the very first draw is redrawn.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    vocab = model.vocab
    if n == 0:
        return []
    temp = cfg.temperature
    state = model._init_state(n)
    tok = np.full(n, vocab.bos, dtype=np.int64)
    seqs = np.full((n, cfg.max_len), -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    banned = [vocab.pad, vocab.bos]

    def draw(z, first):
        z = z.copy()
        z[:, banned] = -np.inf
        if temp == 0:
            if first:
                z[:, vocab.eos] = -np.inf
            return np.argmax(z, axis=1)
        lp = log_softmax(z / temp, axis=1)
        cdf = np.cumsum(np.exp(lp), axis=1)
        out = np.empty(z.shape[0], dtype=np.int64)
        todo = np.arange(z.shape[0])
        for _ in range(MAX_RESAMPLE if first else 1):
            u = rng.random(todo.size) * cdf[todo, -1]
            pick = np.minimum((cdf[todo] < u[:, None]).sum(axis=1), z.shape[1] - 1)
            out[todo] = pick
            if not first:
                break
            todo = todo[pick == vocab.eos]
            if todo.size == 0:
                break
        if first and todo.size:
            zz = z[todo].copy()
            zz[:, vocab.eos] = -np.inf
            out[todo] = np.argmax(zz, axis=1)
        return out

    for pos in range(cfg.max_len):
        z = model._step(state, tok)
        nxt = draw(z, pos == 0)
        nxt = np.where(alive, nxt, vocab.pad)
        alive &= nxt != vocab.eos
        seqs[alive, pos] = nxt[alive]
        tok = np.where(alive, nxt, vocab.pad)
        if not alive.any():
            break

    width = len(str(n - 1))
    out = []
    for i, row in enumerate(seqs):
        toks = tuple(vocab.tokens[j] for j in row if j >= 0)
        out.append(TrajectorySeq(f"{id_prefix}{i:0{width}d}", toks))
    return out


class TrajectoryGenerator(BaseEstimator):
    """Estimator wrapper around :func:`train_seq` and :func:`sample_trajectories`."""

    def __init__(self, epochs=300, batch_size=10, lr=2e-3, clip_norm=5.0, holdout=0.1,
                 embedding_dim=100, hidden_dim=128, attention_dim=64, n_max=4,
                 restore_best=False, patience=None, ema=0.999, temperature=0.7, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.holdout = holdout
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.attention_dim = attention_dim
        self.n_max = n_max
        self.restore_best = restore_best
        self.patience = patience
        self.ema = ema
        self.temperature = temperature
        self.random_state = random_state

    def fit(self, X, y=None, vocab=None):
        p = self.get_params()
        p.pop("temperature")
        p["seed"] = p.pop("random_state") or 0
        res = train_seq(list(X), SeqTrainConfig(**p), vocab=vocab)
        self.model_ = res.model
        self.vocab_ = res.model.vocab
        self.loss_trace_ = res.trace
        self.best_epoch_ = res.best_epoch
        return self

    def sample(self, n, temperature=None, random_state=None):
        check_is_fitted(self, "model_")
        t = self.temperature if temperature is None else temperature
        cfg = SamplerConfig(t, self.n_max, 0)
        return sample_trajectories(self.model_, n, cfg, np.random.default_rng(random_state))

    def predict_proba(self, prefixes):
        """Next-token distributions for a list of zone-token prefixes."""
        check_is_fitted(self, "model_")
        v = self.vocab_
        return np.stack([seq_forward(self.model_, [v.bos, *v.encode(p)]) for p in prefixes])
