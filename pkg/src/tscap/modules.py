"""Learned program space: pattern, locate and combine modules.

A program is a (pattern instance, locate instance) pair. Pattern modules are
small 1-D conv stacks emitting per-position confidences; locate modules are
fixed-mean Gaussian mixtures over *relative* position (so any series length
works); the shared combine module pools the position-wise product into one
truth score in (0, 1). The prior over programs is a softmax of the scores
scaled by a temperature.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx

INPUT_SCALE = 0.01  # raw series live in (0, 100)


def locate_basis(t: int, n_components: int, width: float, dtype=np.float32) -> np.ndarray:
    """(T, K) matrix of unit-height Gaussian bumps on the relative axis."""
    t_rel = (np.arange(t) + 0.5) / t
    mu = (np.arange(1, n_components + 1) - 0.5) / n_components
    g = np.exp(-((t_rel[:, None] - mu[None, :]) ** 2) / (2.0 * width**2))
    return g.astype(dtype)


class ProgramSpace:
    """All module instances plus their embeddings and the prior temperature."""

    def __init__(
        self,
        store: nx.ParameterStore,
        rng,
        n_pattern=6,
        n_locate=4,
        temperature=10.0,
        embed_dim=18,
        conv_channels=8,
        kernel_width=5,
        n_components=6,
        gaussian_width=None,
        prefix="modules.",
    ):
        self.store = store
        self.n_pattern = n_pattern
        self.n_locate = n_locate
        self.temperature = float(temperature)
        self.embed_dim = embed_dim
        self.kernel_width = kernel_width
        self.n_components = n_components
        self.gaussian_width = gaussian_width if gaussian_width is not None else 1.0 / n_components
        self.prefix = prefix
        p = prefix
        for i in range(n_pattern):
            store.uniform(f"{p}pattern{i}.conv1.kernel", (conv_channels, 1, kernel_width), rng)
            store.uniform(f"{p}pattern{i}.conv1.bias", (conv_channels,), rng)
            store.uniform(f"{p}pattern{i}.conv2.kernel", (1, conv_channels, kernel_width), rng)
            store.uniform(f"{p}pattern{i}.conv2.bias", (1,), rng)
        for j in range(n_locate):
            store.uniform(f"{p}locate{j}.logits", (n_components,), rng)
        # break the all-programs-identical tie at init: scores start below 0.5
        store.full(f"{p}combine.weight", (1,), 1.0)
        store.full(f"{p}combine.bias", (1,), -1.0)
        store.uniform(f"{p}embed.pattern", (n_pattern, embed_dim), rng)
        store.uniform(f"{p}embed.locate", (n_locate, embed_dim), rng)
        self._basis_cache: dict[int, np.ndarray] = {}

    # -- program indexing ---------------------------------------------------

    @property
    def n_programs(self) -> int:
        return self.n_pattern * self.n_locate

    def z_index(self, pattern_id: int, locate_id: int) -> int:
        if not (0 <= pattern_id < self.n_pattern and 0 <= locate_id < self.n_locate):
            raise IndexError(f"program ({pattern_id}, {locate_id}) out of range")
        return pattern_id * self.n_locate + locate_id

    def z_pair(self, z: int) -> tuple[int, int]:
        if not 0 <= z < self.n_programs:
            raise IndexError(f"program index {z} out of range")
        return z // self.n_locate, z % self.n_locate

    # -- forwards -----------------------------------------------------------

    def pattern_forward(self, i: int, x: nx.Tensor) -> nx.Tensor:
        """Per-position pattern confidence in (0,1); x is (B, T) raw values."""
        if not 0 <= i < self.n_pattern:
            raise IndexError(f"pattern instance {i} out of range")
        s = self.store
        p = self.prefix
        b, t = x.data.shape
        h = nx.reshape(nx.scale(x, INPUT_SCALE), (b, 1, t))
        h = nx.relu(nx.conv1d(h, s[f"{p}pattern{i}.conv1.kernel"], s[f"{p}pattern{i}.conv1.bias"]))
        h = nx.sigmoid(nx.conv1d(h, s[f"{p}pattern{i}.conv2.kernel"], s[f"{p}pattern{i}.conv2.bias"]))
        return nx.reshape(h, (b, t))

    def locate_forward(self, j: int, t: int) -> nx.Tensor:
        """Positional weights in (0,1]; depends only on parameters and T."""
        if not 0 <= j < self.n_locate:
            raise IndexError(f"locate instance {j} out of range")
        if t not in self._basis_cache:
            self._basis_cache[t] = locate_basis(
                t, self.n_components, self.gaussian_width, self.store.dtype
            )
        basis = nx.constant(self._basis_cache[t], dtype=self.store.dtype)
        weights = nx.softmax(self.store[f"{self.prefix}locate{j}.logits"], axis=-1)
        return nx.matmul(basis, weights)

    def combine_forward(self, activation: nx.Tensor, location: nx.Tensor) -> nx.Tensor:
        """Truth score: sigmoid(w * mean(a*m) + b). Mean pooling keeps the
        score T-agnostic, which is what makes length transfer work."""
        prod = nx.mul(activation, location)
        pooled = nx.reduce_mean(prod, axis=prod.data.ndim - 1)
        s = self.store
        w = s[f"{self.prefix}combine.weight"]
        bias = s[f"{self.prefix}combine.bias"]
        return nx.sigmoid(nx.add(nx.mul(pooled, w), bias))

    def score_program(self, z: tuple[int, int], x: nx.Tensor) -> nx.Tensor:
        """Truth score of one program on a (B, T) batch."""
        i, j = z
        a = self.pattern_forward(i, x)
        m = self.locate_forward(j, x.data.shape[1])
        return self.combine_forward(a, m)

    def scores(self, x: nx.Tensor) -> nx.Tensor:
        """(B, |Z|) truth scores, composed from the same sub-ops as
        score_program so both paths agree exactly."""
        b, t = x.data.shape
        acts = [self.pattern_forward(i, x) for i in range(self.n_pattern)]
        locs = [self.locate_forward(j, t) for j in range(self.n_locate)]
        cols = []
        for i in range(self.n_pattern):
            for j in range(self.n_locate):
                s = self.combine_forward(acts[i], locs[j])
                cols.append(nx.reshape(s, (b, 1)))
        return nx.concat(cols, axis=1)

    def log_prior(self, x: nx.Tensor, scores: nx.Tensor | None = None) -> nx.Tensor:
        if scores is None:
            scores = self.scores(x)
        return nx.log_softmax(nx.scale(scores, self.temperature), axis=-1)

    def prior(self, x: nx.Tensor, scores: nx.Tensor | None = None) -> nx.Tensor:
        """p(z|x) proportional to exp(temperature * score)."""
        if scores is None:
            scores = self.scores(x)
        return nx.softmax(nx.scale(scores, self.temperature), axis=-1)

    # -- embeddings ----------------------------------------------------------

    def program_embedding(self, z: tuple[int, int]) -> nx.Tensor:
        """Pattern embedding then locate embedding, in that fixed order.

        Works for any (i, j) pair, including compositions never seen
        together in training."""
        i, j = z
        self.z_index(i, j)  # range check
        s = self.store
        pe = nx.embedding(s[f"{self.prefix}embed.pattern"], np.array([i]))
        le = nx.embedding(s[f"{self.prefix}embed.locate"], np.array([j]))
        return nx.reshape(nx.concat([pe, le], axis=1), (2 * self.embed_dim,))

    def all_program_embeddings(self) -> nx.Tensor:
        """(|Z|, 2*embed_dim) embeddings in z_index order."""
        s = self.store
        idx_p = np.repeat(np.arange(self.n_pattern), self.n_locate)
        idx_l = np.tile(np.arange(self.n_locate), self.n_pattern)
        pe = nx.embedding(s[f"{self.prefix}embed.pattern"], idx_p)
        le = nx.embedding(s[f"{self.prefix}embed.locate"], idx_l)
        return nx.concat([pe, le], axis=1)
