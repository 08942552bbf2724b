"""Conditioned caption decoder and the caption-encoding inference network.

The decoder is a single-layer LSTM whose per-step input is the previous
token's embedding concatenated with the conditioning vector (a program
embedding, or an encoder output for the baselines). The inference network is
a masked BiLSTM over the caption followed by a flat softmax over programs;
it is only ever used during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import BOS, EOS, PAD, CaptionTokens, Vocabulary

MAX_DECODE_IDS = 16  # sentinels included


@dataclass
class SampleConfig:
    mode: str = "greedy"  # greedy | nucleus
    top_p: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in ("greedy", "nucleus"):
            raise ValueError(f"unknown decode mode: {self.mode}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")


def encode_batch(vocab: Vocabulary, texts) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded id matrix and its float mask for a list of captions."""
    encoded = [vocab.encode(t).ids for t in texts]
    width = max(len(ids) for ids in encoded)
    tokens = np.full((len(encoded), width), PAD, dtype=np.int64)
    for r, ids in enumerate(encoded):
        tokens[r, : len(ids)] = ids
    mask = (tokens != PAD).astype(np.float32)
    return tokens, mask


def nucleus_pick(probs: np.ndarray, top_p: float, rng) -> int:
    """Sample from the smallest prefix of sorted mass >= top_p, renormalized."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p)) + 1
    kept = order[:cut]
    renorm = probs[kept] / probs[kept].sum()
    return int(kept[rng.choice(len(kept), p=renorm)])


class LstmCell:
    """Plain LSTM cell over the tape; gate order i, f, g, o."""

    def __init__(self, store, rng, input_dim, hidden, prefix):
        self.store = store
        self.hidden = hidden
        self.prefix = prefix
        store.uniform(f"{prefix}wx", (input_dim, 4 * hidden), rng)
        store.uniform(f"{prefix}wh", (hidden, 4 * hidden), rng)
        bias = np.zeros(4 * hidden, dtype=store.dtype)
        bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
        store.add(f"{prefix}b", bias)

    def step(self, x, h, c):
        s, n = self.store, self.hidden
        gates = nx.add(
            nx.add(nx.matmul(x, s[f"{self.prefix}wx"]), nx.matmul(h, s[f"{self.prefix}wh"])),
            s[f"{self.prefix}b"],
        )
        i = nx.sigmoid(nx.slice_axis(gates, 1, 0, n))
        f = nx.sigmoid(nx.slice_axis(gates, 1, n, 2 * n))
        g = nx.tanh(nx.slice_axis(gates, 1, 2 * n, 3 * n))
        o = nx.sigmoid(nx.slice_axis(gates, 1, 3 * n, 4 * n))
        c2 = nx.add(nx.mul(f, c), nx.mul(i, g))
        h2 = nx.mul(o, nx.tanh(c2))
        return h2, c2


class Decoder:
    """Autoregressive caption model p(y | conditioning vector)."""

    def __init__(self, store, rng, vocab_size, cond_dim=36, hidden=64, embed_dim=64, prefix="decoder."):
        self.store = store
        self.vocab_size = vocab_size
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.prefix = prefix
        store.uniform(f"{prefix}embed", (vocab_size, embed_dim), rng)
        self.cell = LstmCell(store, rng, embed_dim + cond_dim, hidden, prefix=f"{prefix}lstm.")
        store.uniform(f"{prefix}proj.w", (hidden, vocab_size), rng)
        store.add(f"{prefix}proj.b", np.zeros(vocab_size, dtype=store.dtype))

    def _zeros(self, b):
        return nx.constant(np.zeros((b, self.hidden), dtype=self.store.dtype))

    def step_logits(self, tok_ids, cond, h, c):
        if tok_ids.min(initial=0) < 0 or tok_ids.max(initial=0) >= self.vocab_size:
            raise ValueError("token id out of vocabulary")
        e = nx.embedding(self.store[f"{self.prefix}embed"], tok_ids)
        x = nx.concat([e, cond], axis=1)
        h2, c2 = self.cell.step(x, h, c)
        logits = nx.add(nx.matmul(h2, self.store[f"{self.prefix}proj.w"]), self.store[f"{self.prefix}proj.b"])
        return logits, h2, c2

    def caption_logprob(self, cond: nx.Tensor, tokens: np.ndarray, mask: np.ndarray) -> nx.Tensor:
        """(B,) log p(y | cond) for a right-padded batch with BOS/EOS."""
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError("token id out of vocabulary")
        b, width = tokens.shape
        h = c = self._zeros(b)
        total = nx.constant(np.zeros(b, dtype=self.store.dtype))
        for t in range(width - 1):
            logits, h, c = self.step_logits(tokens[:, t], cond, h, c)
            logp = nx.log_softmax(logits, axis=-1)
            step_lp = nx.gather_cols(logp, tokens[:, t + 1])
            total = nx.add(total, nx.mul(step_lp, nx.constant(mask[:, t + 1])))
        return total

    def decode_batch(self, cond: nx.Tensor, cfg: SampleConfig, vocab: Vocabulary,
                     rng=None, rngs=None):
        """Generate one caption per row of ``cond``; halts on EOS or 16 ids.

        ``rngs`` optionally gives each row its own generator so per-row
        sample streams stay independent of batch composition."""
        if cfg.mode == "nucleus" and rng is None and rngs is None:
            raise ValueError("nucleus sampling needs an rng")
        b = cond.data.shape[0]
        h = c = self._zeros(b)
        rows = [[BOS] for _ in range(b)]
        finished = np.zeros(b, dtype=bool)
        prev = np.full(b, BOS, dtype=np.int64)
        for _ in range(MAX_DECODE_IDS - 2):
            logits, h, c = self.step_logits(prev, cond, h, c)
            if cfg.mode == "greedy":
                nxt = logits.data.argmax(axis=1)
            else:
                scaled = logits.data / cfg.temperature
                scaled = scaled - scaled.max(axis=1, keepdims=True)
                probs = np.exp(scaled)
                probs /= probs.sum(axis=1, keepdims=True)
                nxt = np.array(
                    [
                        nucleus_pick(probs[r], cfg.top_p, rngs[r] if rngs else rng)
                        for r in range(b)
                    ]
                )
            nxt = np.where(finished, PAD, nxt)
            for r in range(b):
                if not finished[r]:
                    rows[r].append(int(nxt[r]))
            finished |= nxt == EOS
            if finished.all():
                break
            prev = np.where(finished, EOS, nxt)
        out = []
        for ids in rows:
            if ids[-1] != EOS:
                ids.append(EOS)
            out.append(CaptionTokens(ids=ids, text=vocab.decode(ids)))
        return out

    def decode(self, cond: nx.Tensor, cfg: SampleConfig, vocab: Vocabulary, rng=None) -> CaptionTokens:
        if cond.data.ndim == 1:
            cond = nx.reshape(cond, (1, cond.data.shape[0]))
        return self.decode_batch(cond, cfg, vocab, rng)[0]


class InferenceNet:
    """q(z | y): masked BiLSTM over the caption, flat softmax over programs."""

    def __init__(self, store, rng, vocab_size, n_programs, hidden=64, embed_dim=64, prefix="inference."):
        self.store = store
        self.vocab_size = vocab_size
        self.n_programs = n_programs
        self.hidden = hidden
        self.prefix = prefix
        store.uniform(f"{prefix}embed", (vocab_size, embed_dim), rng)
        self.fwd = LstmCell(store, rng, embed_dim, hidden, prefix=f"{prefix}fwd.")
        self.bwd = LstmCell(store, rng, embed_dim, hidden, prefix=f"{prefix}bwd.")
        store.uniform(f"{prefix}cls.w", (2 * hidden, n_programs), rng)
        store.add(f"{prefix}cls.b", np.zeros(n_programs, dtype=store.dtype))

    def _run_direction(self, cell, tokens, mask, order):
        b = tokens.shape[0]
        h = c = nx.constant(np.zeros((b, self.hidden), dtype=self.store.dtype))
        for t in order:
            e = nx.embedding(self.store[f"{self.prefix}embed"], tokens[:, t])
            h2, c2 = cell.step(e, h, c)
            col = nx.constant(mask[:, t : t + 1])
            keep = nx.constant(1.0 - mask[:, t : t + 1])
            h = nx.add(nx.mul(h2, col), nx.mul(h, keep))
            c = nx.add(nx.mul(c2, col), nx.mul(c, keep))
        return h

    def posterior_logits(self, tokens: np.ndarray, mask: np.ndarray) -> nx.Tensor:
        width = tokens.shape[1]
        hf = self._run_direction(self.fwd, tokens, mask, range(width))
        hb = self._run_direction(self.bwd, tokens, mask, range(width - 1, -1, -1))
        feats = nx.concat([hf, hb], axis=1)
        return nx.add(nx.matmul(feats, self.store[f"{self.prefix}cls.w"]), self.store[f"{self.prefix}cls.b"])

    def posterior(self, tokens, mask) -> nx.Tensor:
        return nx.softmax(self.posterior_logits(tokens, mask), axis=-1)
