"""Comparison systems: four neural encoders sharing the caption decoder, and
a nearest-neighbour retriever.

Each encoder maps a series to a vector of the same width as a program
embedding, so the decoder implementation (and its weight shapes) is identical
across all systems; only the source of the conditioning vector differs.
Default encoder sizes are tuned so each baseline's prediction-path parameter
count sits within a fraction of a percent of the program model's.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .modules import INPUT_SCALE
from .seq import Decoder, LstmCell, SampleConfig

ENCODING_DIM = 36  # equals the program-embedding width


class FcEncoder:
    """Two-layer perceptron on the raw T-vector; fixed input width."""

    def __init__(self, store, rng, series_len, size=14, out_dim=ENCODING_DIM, prefix="encoder."):
        self.store = store
        self.series_len = series_len
        self.prefix = prefix
        store.uniform(f"{prefix}fc1.w", (series_len, size), rng)
        store.add(f"{prefix}fc1.b", np.zeros(size, dtype=store.dtype))
        store.uniform(f"{prefix}fc2.w", (size, out_dim), rng)
        store.add(f"{prefix}fc2.b", np.zeros(out_dim, dtype=store.dtype))

    def encode(self, x: nx.Tensor) -> nx.Tensor:
        if x.data.shape[1] != self.series_len:
            raise ValueError(
                f"fixed-width encoder expects T={self.series_len}, got {x.data.shape[1]}"
            )
        s, p = self.store, self.prefix
        h = nx.tanh(nx.add(nx.matmul(nx.scale(x, INPUT_SCALE), s[f"{p}fc1.w"]), s[f"{p}fc1.b"]))
        return nx.add(nx.matmul(h, s[f"{p}fc2.w"]), s[f"{p}fc2.b"])


class LstmEncoder:
    """Recurrent encoder; the step-t input is the value x_t repeated ``size``
    times, per the width-h number embedding convention."""

    def __init__(self, store, rng, series_len=None, size=7, out_dim=ENCODING_DIM, prefix="encoder."):
        self.store = store
        self.size = size
        self.prefix = prefix
        self.cell = LstmCell(store, rng, size, size, prefix=f"{prefix}lstm.")
        store.uniform(f"{prefix}proj.w", (size, out_dim), rng)
        store.add(f"{prefix}proj.b", np.zeros(out_dim, dtype=store.dtype))

    def step_input(self, x: nx.Tensor, t: int) -> nx.Tensor:
        col = nx.slice_axis(nx.scale(x, INPUT_SCALE), 1, t, t + 1)
        ones = nx.constant(np.ones((1, self.size), dtype=self.store.dtype))
        return nx.matmul(col, ones)

    def encode(self, x: nx.Tensor) -> nx.Tensor:
        b, t_len = x.data.shape
        h = c = nx.constant(np.zeros((b, self.size), dtype=self.store.dtype))
        for t in range(t_len):
            h, c = self.cell.step(self.step_input(x, t), h, c)
        s, p = self.store, self.prefix
        return nx.add(nx.matmul(h, s[f"{p}proj.w"]), s[f"{p}proj.b"])


class ConvEncoder:
    """Two conv layers, mean pool over time, affine head; length-agnostic."""

    def __init__(self, store, rng, series_len=None, channels=8, kernel_width=5,
                 out_dim=ENCODING_DIM, prefix="encoder."):
        self.store = store
        self.channels = channels
        self.prefix = prefix
        store.uniform(f"{prefix}conv1.kernel", (channels, 1, kernel_width), rng)
        store.uniform(f"{prefix}conv1.bias", (channels,), rng)
        store.uniform(f"{prefix}conv2.kernel", (channels, channels, kernel_width), rng)
        store.uniform(f"{prefix}conv2.bias", (channels,), rng)
        store.uniform(f"{prefix}head.w", (channels, out_dim), rng)
        store.add(f"{prefix}head.b", np.zeros(out_dim, dtype=store.dtype))

    def encode(self, x: nx.Tensor) -> nx.Tensor:
        s, p = self.store, self.prefix
        b, t = x.data.shape
        h = nx.reshape(nx.scale(x, INPUT_SCALE), (b, 1, t))
        h = nx.relu(nx.conv1d(h, s[f"{p}conv1.kernel"], s[f"{p}conv1.bias"]))
        h = nx.relu(nx.conv1d(h, s[f"{p}conv2.kernel"], s[f"{p}conv2.bias"]))
        pooled = nx.reduce_mean(h, axis=2)
        return nx.add(nx.matmul(pooled, s[f"{p}head.w"]), s[f"{p}head.b"])


class FftEncoder:
    """Two-layer perceptron over the real DFT of the series (real and
    imaginary parts concatenated); the transform itself is a fixed
    featurization, not learned."""

    def __init__(self, store, rng, series_len, size=14, out_dim=ENCODING_DIM, prefix="encoder."):
        self.store = store
        self.series_len = series_len
        self.feat_dim = 2 * (series_len // 2 + 1)
        self.prefix = prefix
        store.uniform(f"{prefix}fc1.w", (self.feat_dim, size), rng)
        store.add(f"{prefix}fc1.b", np.zeros(size, dtype=store.dtype))
        store.uniform(f"{prefix}fc2.w", (size, out_dim), rng)
        store.add(f"{prefix}fc2.b", np.zeros(out_dim, dtype=store.dtype))

    @staticmethod
    def fft_features(series: np.ndarray) -> np.ndarray:
        spec = np.fft.rfft(np.asarray(series, dtype=np.float64), axis=-1)
        return np.concatenate([spec.real, spec.imag], axis=-1)

    def encode(self, x: nx.Tensor) -> nx.Tensor:
        if x.data.shape[1] != self.series_len:
            raise ValueError(
                f"fft encoder expects T={self.series_len}, got {x.data.shape[1]}"
            )
        feats = self.fft_features(x.data) / (100.0 * self.series_len)
        f = nx.constant(feats.astype(self.store.dtype))
        s, p = self.store, self.prefix
        h = nx.tanh(nx.add(nx.matmul(f, s[f"{p}fc1.w"]), s[f"{p}fc1.b"]))
        return nx.add(nx.matmul(h, s[f"{p}fc2.w"]), s[f"{p}fc2.b"])


ENCODERS = {"fc": FcEncoder, "lstm": LstmEncoder, "conv": ConvEncoder, "fft": FftEncoder}

# per-kind constructor keyword for TrainConfig.encoder_size overrides
_SIZE_KEY = {"fc": "size", "lstm": "size", "conv": "channels", "fft": "size"}


class BaselineModel:
    """Encoder + shared decoder + training-only classification head."""

    def __init__(self, kind, store, config, vocab, init_rng, series_len):
        self.kind = kind
        self.store = store
        self.config = config
        self.vocab = vocab
        self.series_len = series_len
        kwargs = {}
        if config.encoder_size:
            kwargs[_SIZE_KEY[kind]] = config.encoder_size
        self.encoder = ENCODERS[kind](store, init_rng, series_len=series_len, **kwargs)
        self.decoder = Decoder(
            store, init_rng, len(vocab), cond_dim=ENCODING_DIM,
            hidden=config.hidden, embed_dim=config.token_embed,
        )
        n_programs = config.n_pattern * config.n_locate
        store.uniform("cls.w", (ENCODING_DIM, n_programs), init_rng)
        store.add("cls.b", np.zeros(n_programs, dtype=store.dtype))

    def cls_logits(self, enc: nx.Tensor) -> nx.Tensor:
        return nx.add(nx.matmul(enc, self.store["cls.w"]), self.store["cls.b"])

    def adjust_length(self, series: np.ndarray) -> np.ndarray:
        """Alternate-value subsampling for fixed-width encoders."""
        series = np.asarray(series)
        t = series.shape[-1]
        if self.kind not in ("fc",) or t == self.series_len:
            return series
        if t % self.series_len != 0:
            raise ValueError(f"cannot reduce length {t} to {self.series_len}")
        return series[..., :: t // self.series_len]

    def greedy_captions(self, series, cfg: SampleConfig | None = None, rng=None):
        cfg = cfg or SampleConfig(mode="greedy")
        series = self.adjust_length(series)
        x = nx.constant(np.asarray(series, dtype=self.store.dtype))
        enc = self.encoder.encode(x)
        return self.decoder.decode_batch(enc, cfg, self.vocab, rng)


def prediction_param_count(store: nx.ParameterStore, exclude=("cls.", "inference.", "direct_enc.")) -> int:
    """Trainable parameters on the prediction path only: training-time heads
    (inference network, multitask classifier) are excluded on both sides of a
    comparison, mirroring how model sizes are usually reported."""
    return sum(
        t.data.size for name, t in store.items() if not name.startswith(tuple(exclude))
    )


class NearNbr:
    """Retrieval baseline: caption of the L2-closest training series.

    Ties break toward the lowest training index; one of the neighbour's
    captions is returned uniformly at random from the caller's rng.
    """

    def __init__(self, train_instances):
        if not train_instances:
            raise ValueError("nearest neighbour needs a nonempty train set")
        self.series = np.stack([inst.series for inst in train_instances]).astype(np.float64)
        self.captions = [list(inst.captions) for inst in train_instances]
        self.series_len = self.series.shape[1]

    def adjust_length(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] == self.series_len:
            return x
        if x.shape[-1] % self.series_len != 0:
            raise ValueError(f"cannot reduce length {x.shape[-1]} to {self.series_len}")
        return x[..., :: x.shape[-1] // self.series_len]

    def neighbour(self, x) -> int:
        x = self.adjust_length(x)
        d = ((self.series - x[None, :]) ** 2).sum(axis=1)
        return int(d.argmin())

    def caption(self, x, rng) -> str:
        caps = self.captions[self.neighbour(x)]
        return caps[rng.integers(len(caps))]
