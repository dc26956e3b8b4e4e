"""Independent reference computations shared by the test modules."""

import itertools

import numpy as np

from popsynth.gan import (ConditionSampler, Discriminator, Generator,
                          discriminator_loss_and_grads, generator_loss_and_grads)
from popsynth.schema import (Categorical, Continuous, RecordBatch, TabularSchema,
                             TokenVocabulary, TrajectorySeq)
from popsynth.seqgen import SeqModel, pad_and_mask
from popsynth.transforms import DataTransformer


def brute_force_assignment(c):
    """Minimum total cost over all permutations."""
    n = c.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, c[np.arange(n), list(perm)].sum())
    return best


def rel_err(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_probe(loss_fn, params, analytic, rng, probes, h=1e-5):
    """Compare analytic gradients with central differences at random entries.

    ``params`` maps names to arrays that ``loss_fn`` reads in place and
    ``analytic`` maps the same names to gradients. ``probes`` entries are
    drawn, spread round-robin over the arrays. Returns a list of
    ``(name, index, analytic, numeric, rel_err)``.
    """
    names = list(params)
    out = []
    for j in range(probes):
        name = names[j % len(names)]
        P = params[name]
        i = tuple(int(rng.integers(s)) for s in P.shape)
        orig = P[i]
        P[i] = orig + h
        lp = loss_fn()
        P[i] = orig - h
        lm = loss_fn()
        P[i] = orig
        num = (lp - lm) / (2 * h)
        a = float(analytic[name][i])
        out.append((name, i, a, num, rel_err(a, num)))
    return out


def small_gan_problem(seed=0, width=8, pac=2, batch=4, tau=0.5):
    """A tiny random GAN instance exercising every layer type and loss term."""
    rng = np.random.default_rng(seed)
    schema = TabularSchema((("a", Continuous()), ("s", Categorical(("x", "y"))),
                            ("i", Categorical(("p", "q", "r")))))
    n = 40
    rows = np.c_[rng.normal(size=n), rng.integers(2, size=n), rng.integers(3, size=n)]
    b = RecordBatch(schema, rows, [str(i) for i in range(n)])
    enc = DataTransformer(n_modes=3).fit(b)
    G = Generator(enc, 4, (width, width), rng)
    D = Discriminator(enc.output_dim_, enc.cond_dim_, (width, width), pac, rng)
    # move off the initial point so no gradient is trivially zero
    for net in (G.net, D.net):
        for _, p, _, k in net.named_parameters():
            p[k] += rng.normal(0, 0.3, p[k].shape)
    sampler = ConditionSampler(rows, enc)
    z = rng.normal(size=(batch, 4))
    cond, which, cats = sampler.sample(batch, rng)
    noise = rng.gumbel(size=(batch, enc.output_dim_))
    real = enc.transform(b, rng=rng)[:batch]

    def d_loss():
        return discriminator_loss_and_grads(G, D, z, cond, noise, real, tau)

    def g_loss():
        return generator_loss_and_grads(G, D, z, cond, noise, which, cats, tau, 1.0)

    return G, D, d_loss, g_loss


def gan_gradient_probes(seed=0, probes=60):
    """FD probes of both networks; returns ``{"discriminator": [...], "generator": [...]}``."""
    G, D, d_loss, g_loss = small_gan_problem(seed)
    rng = np.random.default_rng(seed + 1)
    out = {}
    for label, net, fn in (("discriminator", D.net, d_loss), ("generator", G.net, g_loss)):
        fn()
        params = {name: p[k] for name, p, _, k in net.named_parameters()}
        grads = {name: g[k].copy() for name, _, g, k in net.named_parameters()}
        out[label] = fd_probe(fn, params, grads, rng, probes)
    return out


def seq_gradient_probes(seed=0, probes=60):
    rng = np.random.default_rng(seed)
    v = TokenVocabulary(list("ABCDE"))
    m = SeqModel(v, 4, 8, 5, rng=seed + 1)
    for k in m.params:
        m.params[k] = m.params[k] + rng.normal(0, 0.3, m.params[k].shape)
    trajs = [TrajectorySeq(str(i), tuple(rng.choice(list("ABCDE"), rng.integers(1, 5))))
             for i in range(6)]
    pb = pad_and_mask(trajs, v, 4)
    X, Y, M = pb.inputs, pb.targets, pb.mask
    _, grads = m.loss_and_grads(X, Y, M)
    return fd_probe(lambda: m.loss_and_grads(X, Y, M)[0], m.params, grads, rng, probes)
