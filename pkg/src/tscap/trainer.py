"""Training: exact-enumeration ELBO, heuristic labels, the loop, checkpoints.

The objective marginalizes over the whole (small) program space, so both the
reconstruction expectation and the KL term are computed exactly rather than
sampled. Captions that contain exactly one pattern keyword and one locate
keyword contribute an auxiliary classification loss on the inference network,
which anchors module identities and prevents mode collapse.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import numerics as nx
from .data import PairedDataset, Vocabulary, tokenize_text
from .metrics import bleu
from .modules import ProgramSpace
from .seq import Decoder, InferenceNet, SampleConfig, encode_batch

log = logging.getLogger(__name__)

MODEL_KINDS = ("modular", "modular-d", "fc", "lstm", "conv", "fft")

# checkpoint selection keeps the latest epoch whose dev Bleu-4 is within this
# band of the running best
SELECTION_BAND = 0.02


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    # 1e-3 rather than the reference 1e-4: at 50 CPU epochs the shared combine
    # scale cannot travel far enough under Adam's ~lr-sized steps at 1e-4
    lr: float = 1e-3
    lam: float = 10.0
    lam_sweep: tuple = (1.0, 5.0, 10.0, 20.0)
    w_aux: float = 1.0
    direct_conditioning: bool = False
    no_inference_net: bool = False
    no_heuristic: bool = False
    seed: int = 0
    # dev-Bleu-4 plateaus for ~25 epochs while the prior anchors, so early
    # stopping is off by default; pass a smaller patience to re-enable it
    patience: int = 50
    n_pattern: int = 6
    n_locate: int = 4
    module_embed: int = 18
    conv_channels: int = 8
    kernel_width: int = 5
    n_components: int = 6
    hidden: int = 64
    token_embed: int = 64
    lexicon: str = "synth"
    encoder_size: int = 0  # 0 = per-kind parity default

    def to_json(self):
        d = asdict(self)
        d["lam_sweep"] = list(self.lam_sweep)
        return d

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config key '{sorted(unknown)[0]}'")
        obj = dict(obj)
        if "lam_sweep" in obj:
            obj["lam_sweep"] = tuple(obj["lam_sweep"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# heuristic keyword labels


@dataclass(frozen=True)
class HeuristicLexicon:
    """Keyword stems anchored to module ids; matching is lowercase stem-prefix."""

    name: str
    pattern_stems: dict
    locate_stems: dict
    pattern_trends: dict  # pattern id -> increase/decrease, where meaningful
    locate_labels: dict  # locate id -> begin/middle/end/throughout

    def match(self, tokens) -> tuple[set, set]:
        pids, lids = set(), set()
        for tok in tokens:
            for stem, pid in self.pattern_stems.items():
                if tok.startswith(stem):
                    pids.add(pid)
            for stem, lid in self.locate_stems.items():
                if tok.startswith(stem):
                    lids.add(lid)
        return pids, lids

    def anchored_program(self, trend: str, location: str) -> tuple[int, int]:
        pid = next((i for i, tr in self.pattern_trends.items() if tr == trend), None)
        lid = next((j for j, lo in self.locate_labels.items() if lo == location), None)
        if pid is None or lid is None:
            raise KeyError(f"lexicon '{self.name}' has no anchor for ({trend}, {location})")
        return pid, lid


SYNTH_LEXICON = HeuristicLexicon(
    name="synth",
    pattern_stems={
        "increas": 0, "ris": 0, "climb": 0, "grow": 0,
        "decreas": 1, "declin": 1, "dip": 1, "fall": 1, "drop": 1,
    },
    locate_stems={
        "begin": 0, "start": 0, "early": 0,
        "mid": 1, "halfway": 1,
        "end": 2, "late": 2,
    },
    pattern_trends={0: "increase", 1: "decrease"},
    locate_labels={0: "begin", 1: "middle", 2: "end"},
)

# the released-corpus keyword set: one module id per keyword
STOCK_LEXICON = HeuristicLexicon(
    name="stock",
    pattern_stems={"increas": 0, "decreas": 1, "peak": 2, "flat": 3, "dip": 4},
    locate_stems={"beginning": 0, "middle": 1, "end": 2, "throughout": 3},
    pattern_trends={0: "increase", 1: "decrease", 4: "decrease"},
    locate_labels={0: "begin", 1: "middle", 2: "end", 3: "throughout"},
)

LEXICONS = {"synth": SYNTH_LEXICON, "stock": STOCK_LEXICON}


def heuristic_label(text: str, lex: HeuristicLexicon):
    """(pattern id, locate id) iff exactly one of each keyword kind matches."""
    if not text or not text.strip():
        return None
    pids, lids = lex.match(tokenize_text(text))
    if len(pids) == 1 and len(lids) == 1:
        return next(iter(pids)), next(iter(lids))
    return None


def tagged_fraction(captions, lex: HeuristicLexicon) -> float:
    tagged = sum(1 for c in captions if heuristic_label(c, lex) is not None)
    return tagged / len(captions) if captions else 0.0


# ---------------------------------------------------------------------------
# models


class CaptionModel:
    """Program space + decoder (+ inference net, + direct-conditioning encoder)."""

    def __init__(self, store, config: TrainConfig, vocab: Vocabulary, init_rng):
        from .baselines import ConvEncoder  # deferred: baselines imports seq only

        self.config = config
        self.vocab = vocab
        self.store = store
        self.space = ProgramSpace(
            store,
            init_rng,
            n_pattern=config.n_pattern,
            n_locate=config.n_locate,
            temperature=config.lam,
            embed_dim=config.module_embed,
            conv_channels=config.conv_channels,
            kernel_width=config.kernel_width,
            n_components=config.n_components,
        )
        prog_dim = 2 * config.module_embed
        self.encoder = None
        cond_dim = prog_dim
        if config.direct_conditioning:
            self.encoder = ConvEncoder(store, init_rng, out_dim=prog_dim, prefix="direct_enc.")
            cond_dim = 2 * prog_dim
        self.decoder = Decoder(
            store, init_rng, len(vocab), cond_dim=cond_dim,
            hidden=config.hidden, embed_dim=config.token_embed,
        )
        self.inference = None
        if not config.no_inference_net:
            self.inference = InferenceNet(
                store, init_rng, len(vocab), self.space.n_programs,
                hidden=config.hidden, embed_dim=config.token_embed,
            )

    @property
    def kind(self):
        return "modular-d" if self.config.direct_conditioning else "modular"

    def conditioning(self, x: nx.Tensor, z_rows: np.ndarray) -> nx.Tensor:
        """Decoder conditioning rows for (instance, program) pairs.

        ``z_rows`` holds one program index per output row; rows are grouped
        instance-major, ``x`` has one row per instance."""
        embeds = self.space.all_program_embeddings()
        cond = nx.embedding(embeds, z_rows)
        if self.encoder is not None:
            enc = self.encoder.encode(x)
            rows_per_inst = len(z_rows) // x.data.shape[0]
            inst_rows = np.repeat(np.arange(x.data.shape[0]), rows_per_inst)
            cond = nx.concat([cond, nx.embedding(enc, inst_rows)], axis=1)
        return cond

    def caption_logprob_all(self, x: nx.Tensor, tokens, mask) -> nx.Tensor:
        """(B, |Z|) matrix of log p(y_b | z) for every program."""
        b = tokens.shape[0]
        nz = self.space.n_programs
        z_rows = np.tile(np.arange(nz), b)
        cond = self.conditioning(x, z_rows)
        rep_tokens = np.repeat(tokens, nz, axis=0)
        rep_mask = np.repeat(mask, nz, axis=0)
        lp = self.decoder.caption_logprob(cond, rep_tokens, rep_mask)
        return nx.reshape(lp, (b, nz))

    def greedy_captions(self, series, cfg: SampleConfig | None = None, rng=None, z_override=None):
        """Captions for the argmax-prior program of each series (the test-time
        path: sample/argmax a program, then decode from its embedding)."""
        cfg = cfg or SampleConfig(mode="greedy")
        x = nx.constant(np.asarray(series, dtype=self.store.dtype))
        prior = self.prior_np(series)
        z_sel = prior.argmax(axis=1) if z_override is None else np.asarray(z_override)
        cond = self.conditioning(x, z_sel)
        caps = self.decoder.decode_batch(cond, cfg, self.vocab, rng)
        return caps, z_sel, prior

    def prior_np(self, series) -> np.ndarray:
        x = nx.constant(np.asarray(series, dtype=self.store.dtype))
        return self.space.prior(x).data


# ---------------------------------------------------------------------------
# objective pieces


def elbo_parts(log_q: nx.Tensor, log_prior: nx.Tensor, cap_logprob: nx.Tensor):
    """Per-instance (elbo, reconstruction, kl), all exact enumerations."""
    q = nx.exp(log_q)
    recon = nx.reduce_sum(nx.mul(q, cap_logprob), axis=1)
    kl = nx.reduce_sum(nx.mul(q, nx.sub(log_q, log_prior)), axis=1)
    return nx.sub(recon, kl), recon, kl


def marginal_loglik(log_prior: nx.Tensor, cap_logprob: nx.Tensor) -> nx.Tensor:
    """log p(y|x) = logsumexp_z [log p(z|x) + log p(y|z)], per instance."""
    return nx.logsumexp(nx.add(log_prior, cap_logprob), axis=1)


def aux_loss(log_q: nx.Tensor, labeled_rows) -> nx.Tensor:
    """Mean cross-entropy -log q(z*|y) over heuristically tagged captions."""
    if not labeled_rows:
        return nx.constant(np.zeros(()))
    rows = np.array([r for r, _ in labeled_rows])
    zs = np.array([z for _, z in labeled_rows])
    picked = nx.gather_cols(nx.embedding(log_q, rows), zs)
    return nx.scale(nx.reduce_mean(picked), -1.0)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    store: nx.ParameterStore
    model: object
    vocab: Vocabulary
    config: TrainConfig
    kind: str
    metrics: list = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False


def _caption_pairs(instances):
    pairs = []
    for idx, inst in enumerate(instances):
        for cap in inst.captions:
            pairs.append((idx, cap))
    return pairs


def _dev_bleu4(model, dev_instances):
    if not dev_instances:
        return 0.0
    series = np.stack([inst.series for inst in dev_instances])
    caps, _, _ = model.greedy_captions(series)
    return bleu([c.text for c in caps], [inst.captions for inst in dev_instances], 4)


def probe_identities(model: CaptionModel, instances, tol=1e-7):
    """Variational sanity identities on a probe batch; returns the measured
    worst-case values so callers can assert/log them.

    The identities are exact mathematics, so they are evaluated on a float64
    twin of the model (same parameters); float32 roundoff would otherwise
    swamp the tightness bound."""
    store64 = nx.ParameterStore(dtype=np.float64)
    twin = CaptionModel(store64, model.config, model.vocab, np.random.default_rng(0))
    store64.restore(model.store.snapshot())
    model = twin
    series = np.stack([inst.series for inst in instances])
    texts = [inst.captions[0] for inst in instances]
    x = nx.constant(np.asarray(series, dtype=model.store.dtype), dtype=np.float64)
    tokens, mask = encode_batch(model.vocab, texts)
    scores = model.space.scores(x)
    log_prior = model.space.log_prior(x, scores=scores)
    prior = model.space.prior(x, scores=scores)
    cap_lp = model.caption_logprob_all(x, tokens, mask)
    marg = marginal_loglik(log_prior, cap_lp)
    report = {
        "prior_sum_err": float(np.abs(prior.data.sum(axis=1) - 1.0).max()),
        "score_min": float(scores.data.min()),
        "score_max": float(scores.data.max()),
    }
    if model.inference is not None:
        log_q = nx.log_softmax(model.inference.posterior_logits(tokens, mask), axis=-1)
        elbo, _, kl = elbo_parts(log_q, log_prior, cap_lp)
        report["kl_min"] = float(kl.data.min())
        report["elbo_gap_min"] = float((marg.data - elbo.data).min())
        report["elbo_mean"] = float(elbo.data.mean())
    # q at the exact posterior must close the bound
    post = nx.log_softmax(nx.add(log_prior, cap_lp), axis=-1)
    tight, _, _ = elbo_parts(post, log_prior, cap_lp)
    report["tight_gap_max"] = float(np.abs(marg.data - tight.data).max())
    locate_min = min(
        float(model.space.locate_forward(j, series.shape[1]).data.min())
        for j in range(model.space.n_locate)
    )
    report["locate_min"] = locate_min
    ok = (
        report["prior_sum_err"] <= 1e-6
        and 0.0 < report["score_min"]
        and report["score_max"] < 1.0
        and report.get("kl_min", 0.0) >= -tol
        and report.get("elbo_gap_min", 0.0) >= -1e-5
        and report["tight_gap_max"] < 1e-6
        and locate_min > 0.0
    )
    report["ok"] = ok
    return report


def train(config: TrainConfig, dataset: PairedDataset) -> TrainResult:
    """Train the program captioner; returns the best-dev-Bleu-4 parameters."""
    train_insts = dataset.split("train")
    dev_insts = dataset.split("dev")
    if not train_insts:
        raise ValueError("dataset has no train split")
    vocab = Vocabulary.build(cap for inst in train_insts for cap in inst.captions)
    store = nx.ParameterStore()
    init_rng = np.random.default_rng(config.seed)
    model = CaptionModel(store, config, vocab, init_rng)
    lex = LEXICONS[config.lexicon]

    pairs = _caption_pairs(train_insts)
    labels = {}
    if not config.no_heuristic and config.w_aux > 0 and model.inference is not None:
        for k, (idx, cap) in enumerate(pairs):
            lab = heuristic_label(cap, lex)
            if lab is not None:
                labels[k] = model.space.z_index(*lab)
        if not labels:
            log.warning("no captions matched the heuristic lexicon; aux loss contributes 0")
    elif not config.no_heuristic and config.w_aux > 0 and model.inference is None:
        log.warning("no inference net: heuristic aux loss has nothing to supervise")

    series_all = np.stack([inst.series for inst in train_insts]).astype(store.dtype)
    shuffle_rng = np.random.default_rng(config.seed + 1)
    adam = nx.AdamState(lr=config.lr)
    probe = (dev_insts or train_insts)[:16]

    best_bleu, best_epoch, best_snap = -1.0, -1, store.snapshot()
    last_good = store.snapshot()
    metrics = []
    diverged = False
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(pairs))
        sums = {"elbo": 0.0, "recon": 0.0, "kl": 0.0, "aux": 0.0, "marginal": 0.0}
        seen = 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            inst_ids = [pairs[k][0] for k in batch]
            texts = [pairs[k][1] for k in batch]
            x = nx.constant(series_all[inst_ids])
            tokens, mask = encode_batch(vocab, texts)
            labeled = [(r, labels[k]) for r, k in enumerate(batch) if k in labels]
            tape = nx.Tape()
            with tape:
                scores = model.space.scores(x)
                log_prior = model.space.log_prior(x, scores=scores)
                cap_lp = model.caption_logprob_all(x, tokens, mask)
                if model.inference is None:
                    marg = marginal_loglik(log_prior, cap_lp)
                    loss = nx.scale(nx.reduce_mean(marg), -1.0)
                    batch_stats = {"elbo": float(marg.data.mean()), "kl": 0.0,
                                   "marginal": float(marg.data.mean()), "aux": 0.0,
                                   "recon": float(marg.data.mean())}
                else:
                    log_q = nx.log_softmax(model.inference.posterior_logits(tokens, mask), axis=-1)
                    elbo, recon, kl = elbo_parts(log_q, log_prior, cap_lp)
                    loss = nx.scale(nx.reduce_mean(elbo), -1.0)
                    aux = aux_loss(log_q, labeled)
                    if labeled and config.w_aux > 0:
                        loss = nx.add(loss, nx.scale(aux, config.w_aux))
                    with nx.Tape():  # diagnostics only, kept off the main tape
                        marg_val = float(marginal_loglik(log_prior, cap_lp).data.mean())
                    batch_stats = {"elbo": float(elbo.data.mean()), "recon": float(recon.data.mean()),
                                   "kl": float(kl.data.mean()), "aux": float(aux.data),
                                   "marginal": marg_val}
            if not np.isfinite(loss.data):
                log.error("divergent loss at epoch %d; reverting to last good parameters", epoch)
                store.restore(last_good)
                diverged = True
                break
            grads = nx.backward(tape, loss, store)
            nx.adam_step(store, grads, adam)
            for key in sums:
                sums[key] += batch_stats[key] * len(batch)
            seen += len(batch)
        if diverged:
            break
        epoch_stats = {k: v / max(seen, 1) for k, v in sums.items()}
        report = probe_identities(model, probe)
        if not report["ok"]:
            raise AssertionError(f"variational identity violated: {report}")
        dev_bleu = _dev_bleu4(model, dev_insts)
        metrics.append({"epoch": epoch, "dev_bleu4": dev_bleu, **epoch_stats,
                        "probe": {k: v for k, v in report.items() if k != "ok"}})
        log.info("epoch %d elbo %.4f kl %.4f aux %.4f dev-bleu4 %.4f",
                 epoch, epoch_stats["elbo"], epoch_stats["kl"], epoch_stats["aux"], dev_bleu)
        last_good = store.snapshot()
        # selection: latest epoch within 0.02 dev-Bleu-4 of the best so far;
        # the prior keeps sharpening long after captions stop moving Bleu
        if dev_bleu >= best_bleu - SELECTION_BAND:
            best_bleu = max(best_bleu, dev_bleu)
            best_epoch, best_snap = epoch, store.snapshot()
        elif epoch - best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    store.restore(best_snap if not diverged else last_good)
    return TrainResult(store=store, model=model, vocab=vocab, config=config,
                       kind=model.kind, metrics=metrics, best_epoch=best_epoch,
                       diverged=diverged)


def train_baseline(kind: str, config: TrainConfig, dataset: PairedDataset) -> TrainResult:
    """Encoder-decoder baseline with the multitask heuristic-classification loss."""
    from .baselines import BaselineModel

    if kind not in ("fc", "lstm", "conv", "fft"):
        raise ValueError(f"not a trainable baseline kind: {kind}")
    train_insts = dataset.split("train")
    dev_insts = dataset.split("dev")
    if not train_insts:
        raise ValueError("dataset has no train split")
    vocab = Vocabulary.build(cap for inst in train_insts for cap in inst.captions)
    store = nx.ParameterStore()
    init_rng = np.random.default_rng(config.seed)
    model = BaselineModel(kind, store, config, vocab, init_rng,
                          series_len=len(train_insts[0].series))
    lex = LEXICONS[config.lexicon]

    pairs = _caption_pairs(train_insts)
    labels = {}
    if not config.no_heuristic and config.w_aux > 0:
        for k, (idx, cap) in enumerate(pairs):
            lab = heuristic_label(cap, lex)
            if lab is not None:
                labels[k] = lab[0] * config.n_locate + lab[1]

    series_all = np.stack([inst.series for inst in train_insts]).astype(store.dtype)
    shuffle_rng = np.random.default_rng(config.seed + 1)
    adam = nx.AdamState(lr=config.lr)

    best_bleu, best_epoch, best_snap = -1.0, -1, store.snapshot()
    last_good = store.snapshot()
    metrics = []
    diverged = False
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(pairs))
        sums = {"loglik": 0.0, "cls": 0.0}
        seen = 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            inst_ids = [pairs[k][0] for k in batch]
            texts = [pairs[k][1] for k in batch]
            x = nx.constant(series_all[inst_ids])
            tokens, mask = encode_batch(vocab, texts)
            labeled = [(r, labels[k]) for r, k in enumerate(batch) if k in labels]
            tape = nx.Tape()
            with tape:
                enc = model.encoder.encode(x)
                lp = model.decoder.caption_logprob(enc, tokens, mask)
                loss = nx.scale(nx.reduce_mean(lp), -1.0)
                cls_val = 0.0
                if labeled and config.w_aux > 0:
                    cls_logp = nx.log_softmax(model.cls_logits(enc), axis=-1)
                    cls = aux_loss(cls_logp, labeled)
                    cls_val = float(cls.data)
                    loss = nx.add(loss, nx.scale(cls, config.w_aux))
            if not np.isfinite(loss.data):
                log.error("divergent loss at epoch %d; reverting", epoch)
                store.restore(last_good)
                diverged = True
                break
            grads = nx.backward(tape, loss, store)
            nx.adam_step(store, grads, adam)
            sums["loglik"] += float(lp.data.mean()) * len(batch)
            sums["cls"] += cls_val * len(batch)
            seen += len(batch)
        if diverged:
            break
        epoch_stats = {k: v / max(seen, 1) for k, v in sums.items()}
        dev_bleu = _baseline_dev_bleu(model, dev_insts)
        metrics.append({"epoch": epoch, "dev_bleu4": dev_bleu, **epoch_stats})
        log.info("epoch %d loglik %.4f cls %.4f dev-bleu4 %.4f",
                 epoch, epoch_stats["loglik"], epoch_stats["cls"], dev_bleu)
        last_good = store.snapshot()
        if dev_bleu >= best_bleu - SELECTION_BAND:
            best_bleu = max(best_bleu, dev_bleu)
            best_epoch, best_snap = epoch, store.snapshot()
        elif epoch - best_epoch >= config.patience:
            break
    store.restore(best_snap if not diverged else last_good)
    return TrainResult(store=store, model=model, vocab=vocab, config=config,
                       kind=kind, metrics=metrics, best_epoch=best_epoch,
                       diverged=diverged)


def _baseline_dev_bleu(model, dev_instances):
    if not dev_instances:
        return 0.0
    series = np.stack([inst.series for inst in dev_instances])
    caps = model.greedy_captions(series)
    return bleu([c.text for c in caps], [inst.captions for inst in dev_instances], 4)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"tscap-checkpoint v1\n"


def save_checkpoint(result: TrainResult, path):
    """Manifest header plus named little-endian float32 tensor blocks."""
    manifest = {
        "format_version": 1,
        "tool_version": __version__,
        "kind": result.kind,
        "config": result.config.to_json(),
        "vocab": result.vocab.to_json(),
        "best_epoch": result.best_epoch,
        "diverged": result.diverged,
        "series_len": getattr(result.model, "series_len", None),
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    items = list(result.store.items())
    buf.write(struct.pack("<I", len(items)))
    for name, tensor in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> TrainResult:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        head = blob.split(b"\n", 1)[0][:40]
        raise ValueError(f"not a v1 checkpoint (header {head!r})")
    off = len(_MAGIC)
    (mlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    manifest = json.loads(blob[off : off + mlen].decode("utf-8"))
    off += mlen
    if manifest.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = arr.astype(np.float32)

    config = TrainConfig.from_json(manifest["config"])
    vocab = Vocabulary.from_json(manifest["vocab"])
    kind = manifest["kind"]
    store = nx.ParameterStore()
    init_rng = np.random.default_rng(config.seed)
    if kind in ("modular", "modular-d"):
        model = CaptionModel(store, config, vocab, init_rng)
    else:
        from .baselines import BaselineModel

        series_len = manifest.get("series_len", 12)
        model = BaselineModel(kind, store, config, vocab, init_rng, series_len=series_len)
    expected = set(store.names())
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))[:3]
        raise ValueError(f"checkpoint tensors do not match model (missing {missing})")
    store.restore(tensors)
    return TrainResult(store=store, model=model, vocab=vocab, config=config,
                       kind=kind, best_epoch=manifest.get("best_epoch", -1),
                       diverged=manifest.get("diverged", False))
