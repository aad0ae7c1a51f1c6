"""Toy character-level sequence GAN on a synthetic Markov corpus, evaluated by JS-4."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.nets import ConvCritic, ConvGenerator
from .autodiff.tensor import Tensor, no_grad
from .gan import ALMState, CONSTRAINT_KINDS, alm_critic_step, constraint_points, generator_step

__all__ = [
    "CharCorpus",
    "markov_chain",
    "AnnealSchedule",
    "anneal",
    "smooth_onehot",
    "onehot",
    "ngram_counts",
    "js4",
    "TextGanConfig",
    "train_text_gan",
    "generate_text",
]

TEXT_RULES = ("average", "gp", "smoothed_annealed")


@dataclass
class CharCorpus:
    """Fixed-length token sequences from an order-1 Markov chain."""

    vocab: int
    length: int
    transition: np.ndarray
    initial: np.ndarray
    sequences: np.ndarray

    def __post_init__(self):
        s = self.sequences
        if s.ndim != 2 or s.shape[1] != self.length:
            raise ValueError("sequences must be an (n, length) array")
        if s.size and (s.min() < 0 or s.max() >= self.vocab):
            raise ValueError("tokens must lie in [0, vocab)")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Fresh sequences from the same chain."""
        return _run_chain(self.transition, self.initial, n, self.length, rng)

    def batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Rows drawn with replacement from the stored corpus."""
        return self.sequences[rng.integers(0, len(self.sequences), size=n)]


def _run_chain(trans, init, n, length, rng) -> np.ndarray:
    v = len(init)
    out = np.empty((n, length), dtype=np.int64)
    cum_init = np.cumsum(init)
    cum = np.cumsum(trans, axis=1)
    out[:, 0] = np.minimum(np.searchsorted(cum_init, rng.random(n), side="right"), v - 1)
    for t in range(1, length):
        u = rng.random(n)
        rows = cum[out[:, t - 1]]
        out[:, t] = np.minimum((rows < u[:, None]).sum(axis=1), v - 1)
    return out


def markov_chain(vocab: int, length: int, n: int, rng: np.random.Generator,
                 concentration: float = 0.3) -> CharCorpus:
    """Random sparse-ish transition matrix (Dirichlet rows) and `n` sequences from it."""
    if vocab < 2 or length < 1 or n < 1:
        raise ValueError("need vocab >= 2, length >= 1, n >= 1")
    trans = rng.dirichlet(np.full(vocab, concentration), size=vocab)
    init = rng.dirichlet(np.ones(vocab))
    seqs = _run_chain(trans, init, n, length, rng)
    return CharCorpus(vocab, length, trans, init, seqs)


@dataclass(frozen=True)
class AnnealSchedule:
    sigma0: float
    maxiter: int

    def __post_init__(self):
        if self.sigma0 < 0 or self.maxiter < 1:
            raise ValueError("need sigma0 >= 0 and maxiter >= 1")


def anneal(schedule: AnnealSchedule, i: int) -> float:
    """``sigma0 (1 - i / maxiter)``."""
    if not 0 <= i <= schedule.maxiter:
        raise ValueError(f"iteration {i} outside [0, {schedule.maxiter}]")
    return schedule.sigma0 * (1.0 - i / schedule.maxiter)


def onehot(tokens, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    return np.eye(vocab)[tokens]


def smooth_onehot(tokens, vocab: int, sigma: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rows ``softmax(log p + eps)`` with p the 0.9 / 0.1-smoothed one-hot and ``eps ~ N(0, sigma^2)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    tokens = np.asarray(tokens)
    off = 0.1 / (vocab - 1)
    logp = np.full(tokens.shape + (vocab,), np.log(off))
    np.put_along_axis(logp, tokens[..., None], np.log(0.9), axis=-1)
    if sigma > 0:
        if rng is None:
            raise ValueError("sigma > 0 needs an rng")
        logp = logp + sigma * rng.standard_normal(logp.shape)
    logp -= logp.max(axis=-1, keepdims=True)
    e = np.exp(logp)
    return e / e.sum(axis=-1, keepdims=True)


def ngram_counts(seqs, n: int = 4) -> dict[tuple, int]:
    """Counts of overlapping n-grams over all sequences."""
    seqs = np.asarray(seqs)
    if seqs.ndim != 2 or seqs.shape[1] < n:
        raise ValueError(f"sequences must be 2-D with length >= {n}")
    windows = np.lib.stride_tricks.sliding_window_view(seqs, n, axis=1).reshape(-1, n)
    grams, counts = np.unique(windows, axis=0, return_counts=True)
    return {tuple(int(t) for t in g): int(c) for g, c in zip(grams, counts)}


def js4(corpus_a, corpus_b) -> float:
    """Jensen-Shannon divergence (natural log) between empirical 4-gram distributions."""
    ca, cb = ngram_counts(corpus_a, 4), ngram_counts(corpus_b, 4)
    keys = sorted(set(ca) | set(cb))
    p = np.array([ca.get(k, 0) for k in keys], dtype=np.float64)
    q = np.array([cb.get(k, 0) for k in keys], dtype=np.float64)
    p /= p.sum()
    q /= q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return max(0.5 * kl(p) + 0.5 * kl(q), 0.0)


@dataclass
class TextGanConfig:
    seed: int
    kind: str = "sobolev"
    rule: str = "smoothed_annealed"
    vocab: int = 5
    length: int = 8
    corpus_size: int = 10000
    iters: int = 10000
    sigma0: float = 1.5
    lr: float = 1e-4
    rho: float = 1e-5
    n_critic: int = 5
    batch: int = 64
    noise_dim: int = 16
    width: int = 32
    layers: int = 2
    eval_every: int = 1000
    eval_samples: int = 2000
    corpus_seed: int | None = None
    debug_copy: bool = False

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.rule not in TEXT_RULES:
            raise ValueError(f"unknown mu rule {self.rule!r}")
        if self.length < 4:
            raise ValueError("JS-4 needs sequences of length >= 4")


def generate_text(generator, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample sequences and decode each position by argmax."""
    with no_grad():
        probs = generator(Tensor(rng.standard_normal((n, generator.noise_dim)))).data
    return probs.argmax(axis=-1)


def train_text_gan(cfg: TextGanConfig) -> dict:
    """Train on the synthetic corpus; returns the JS-4 curve and run diagnostics.

    With ``debug_copy`` the generator is replaced by fresh draws from the
    chain, which measures the JS-4 floor of the evaluation itself.
    """
    corpus_rng = np.random.default_rng(cfg.seed if cfg.corpus_seed is None else cfg.corpus_seed)
    corpus = markov_chain(cfg.vocab, cfg.length, cfg.corpus_size, corpus_rng)
    held_out = corpus.sample(cfg.eval_samples, corpus_rng)
    rng = np.random.default_rng(cfg.seed)

    if cfg.debug_copy:
        score = js4(corpus.sample(cfg.eval_samples, rng), held_out)
        return {"iter": [0], "js4": [score], "baseline": score, "final": score, "corpus": corpus}

    critic = ConvCritic(cfg.length, cfg.vocab, cfg.width, cfg.layers, rng=rng)
    generator = ConvGenerator(cfg.noise_dim, cfg.length, cfg.vocab, cfg.width, cfg.layers, rng=rng)
    state = ALMState(critic, generator, kind=cfg.kind, rule="average" if cfg.rule != "gp" else "gp",
                     rho=cfg.rho, lr=cfg.lr, n_critic=cfg.n_critic, batch=cfg.batch)
    schedule = AnnealSchedule(cfg.sigma0, cfg.iters)
    eval_rng = np.random.default_rng(cfg.seed + 1)
    curve = {"iter": [], "js4": [], "Omega": [], "lam": []}

    def evaluate(it, info):
        curve["iter"].append(it)
        curve["js4"].append(js4(generate_text(generator, cfg.eval_samples, eval_rng), held_out))
        curve["Omega"].append(info.get("Omega", float("nan")))
        curve["lam"].append(state.lam)

    evaluate(0, {})
    for it in range(cfg.iters):
        sigma = anneal(schedule, it) if cfg.rule == "smoothed_annealed" else 0.0
        for _ in range(cfg.n_critic):
            tokens = corpus.batch(cfg.batch, rng)
            if cfg.rule == "smoothed_annealed":
                real = smooth_onehot(tokens, cfg.vocab, sigma, rng)
            else:
                real = onehot(tokens, cfg.vocab)
            with no_grad():
                fake = generator(Tensor(rng.standard_normal((cfg.batch, cfg.noise_dim)))).data
            rule = "gp" if cfg.kind == "wgan_gp" or cfg.rule == "gp" else "average"
            pts = constraint_points(rule, real, fake, rng)
            info = alm_critic_step(state, real, fake, rng, points=pts)
        generator_step(state, rng.standard_normal((cfg.batch, cfg.noise_dim)))
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iters:
            evaluate(it + 1, info)
    curve["baseline"] = curve["js4"][0]
    curve["final"] = curve["js4"][-1]
    curve["corpus"] = corpus
    curve["samples"] = generate_text(generator, 20, eval_rng)
    return curve
