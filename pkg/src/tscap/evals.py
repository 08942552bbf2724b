"""Evaluation drivers: keyword oracle, correctness, coverage curves,
module/word association tables, compositional and length-transfer probes.

Correctness here is the programmatic stand-in used on synthetic data: a
caption is correct when the keyword oracle parses it to exactly the annotated
(trend, location). Stock-style data has no machine-checkable ground truth, so
reports mark correctness as unavailable rather than guessing.
"""

from __future__ import annotations

import importlib.resources
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import tokenize_text
from .metrics import bleu, cider, rouge_l
from .seq import SampleConfig, encode_batch, nucleus_pick
from .trainer import (
    HeuristicLexicon,
    LEXICONS,
    TrainResult,
    marginal_loglik,
)

DEFAULT_TOP_P_SWEEP = (0.3, 0.5, 0.7, 0.9, 1.0)
DEFAULT_SAMPLES_PER_INSTANCE = 12

_MODULAR_KINDS = ("modular", "modular-d")


def load_stopwords() -> frozenset:
    text = importlib.resources.files("tscap").joinpath("stopwords.txt").read_text()
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


# ---------------------------------------------------------------------------
# oracle


def oracle_parse(text: str, lex: HeuristicLexicon):
    """(trend, location) iff exactly one keyword of each kind matches and the
    pattern keyword maps to a trend; otherwise None."""
    if not text or not text.strip():
        return None
    pids, lids = lex.match(tokenize_text(text))
    if len(pids) != 1 or len(lids) != 1:
        return None
    trend = lex.pattern_trends.get(next(iter(pids)))
    if trend is None:
        return None
    return trend, lex.locate_labels[next(iter(lids))]


def _require_meta(instances):
    missing = [inst.id for inst in instances if inst.meta is None]
    if missing:
        raise ValueError(
            f"correctness needs pattern metadata; instance '{missing[0]}' has none "
            "(human judgement is the only option for un-annotated data)"
        )


def generate_greedy(result: TrainResult, series: np.ndarray):
    """Greedy captions for a batch of series, any trained model kind."""
    if result.kind in _MODULAR_KINDS:
        caps, _, _ = result.model.greedy_captions(series)
        return caps
    return result.model.greedy_captions(series)


def _chunked_greedy(result, instances, threads=1, chunk=64):
    chunks = [instances[i : i + chunk] for i in range(0, len(instances), chunk)]

    def run(group):
        return generate_greedy(result, np.stack([inst.series for inst in group]))

    if threads <= 1 or len(chunks) == 1:
        batches = [run(g) for g in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(run, chunks))
    return [cap for batch in batches for cap in batch]


def correctness(result: TrainResult, instances, lex: HeuristicLexicon | None = None,
                threads=1):
    """Fraction of greedy captions whose oracle parse equals the annotation."""
    lex = lex or LEXICONS[result.config.lexicon]
    _require_meta(instances)
    caps = _chunked_greedy(result, instances, threads=threads)
    records = []
    hits = 0
    for inst, cap in zip(instances, caps):
        parsed = oracle_parse(cap.text, lex)
        ok = parsed == (inst.meta.trend, inst.meta.location)
        hits += ok
        records.append({"id": inst.id, "caption": cap.text, "parsed": parsed, "correct": ok})
    return hits / len(instances), records


def near_nbr_correctness(nn, instances, lex: HeuristicLexicon, seed=0):
    _require_meta(instances)
    rng = np.random.default_rng(seed)
    hits = 0
    for inst in instances:
        cap = nn.caption(inst.series, rng)
        hits += oracle_parse(cap, lex) == (inst.meta.trend, inst.meta.location)
    return hits / len(instances)


# ---------------------------------------------------------------------------
# perplexity and the metric report


def perplexity(result: TrainResult, instances, batch_instances=24) -> float:
    """exp(-mean per-token log-likelihood); program models marginalize over z."""
    pairs = [(inst, cap) for inst in instances for cap in inst.captions]
    if not pairs:
        raise ValueError("perplexity needs at least one caption")
    total_lp = 0.0
    total_tokens = 0
    for lo in range(0, len(pairs), batch_instances):
        group = pairs[lo : lo + batch_instances]
        series = np.stack([inst.series for inst, _ in group])
        texts = [cap for _, cap in group]
        tokens, mask = encode_batch(result.vocab, texts)
        x = nx.constant(series.astype(result.store.dtype))
        if result.kind in _MODULAR_KINDS:
            model = result.model
            log_prior = model.space.log_prior(x)
            cap_lp = model.caption_logprob_all(x, tokens, mask)
            lp = marginal_loglik(log_prior, cap_lp).data
        else:
            enc = result.model.encoder.encode(x)
            lp = result.model.decoder.caption_logprob(enc, tokens, mask).data
        total_lp += float(lp.sum())
        total_tokens += int(mask[:, 1:].sum())
    return float(np.exp(-total_lp / total_tokens))


@dataclass
class MetricReport:
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    perplexity: float
    correctness: float | None
    n_instances: int
    per_instance: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_json(self):
        return {
            "bleu3": self.bleu3,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "perplexity": self.perplexity,
            "correctness": self.correctness,
            "n_instances": self.n_instances,
            "per_instance": self.per_instance,
            "notes": self.notes,
        }


def metric_report(result: TrainResult, instances, lex: HeuristicLexicon | None = None,
                  threads=1) -> MetricReport:
    lex = lex or LEXICONS[result.config.lexicon]
    caps = _chunked_greedy(result, instances, threads=threads)
    cands = [c.text for c in caps]
    refs = [inst.captions for inst in instances]
    notes = ["cider: tf-idf n-gram cosine, orders 1..4, x10 scaling"]
    cor = None
    if all(inst.meta is not None for inst in instances):
        hits = sum(
            oracle_parse(c, lex) == (inst.meta.trend, inst.meta.location)
            for c, inst in zip(cands, instances)
        )
        cor = hits / len(instances)
    else:
        notes.append("correctness: not machine-checkable without pattern metadata")
    per_instance = [
        {"id": inst.id, "caption": c} for inst, c in zip(instances, cands)
    ]
    return MetricReport(
        bleu3=bleu(cands, refs, 3),
        bleu4=bleu(cands, refs, 4),
        rouge_l=rouge_l(cands, refs),
        cider=cider(cands, refs),
        perplexity=perplexity(result, instances),
        correctness=cor,
        n_instances=len(instances),
        per_instance=per_instance,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# coverage/correctness curves


@dataclass
class CoveragePoint:
    top_p: float
    correctness: float
    coverage: float


def _sample_captions(result, instances, n_samples, top_p, seed):
    """n_samples captions per instance. Program models sample at the program
    selection stage (then decode greedily); baselines sample tokens. Each
    (instance, sample) slot has its own seed stream so sample sets for
    smaller n are prefixes of those for larger n."""
    n = len(instances)
    series = np.stack([inst.series for inst in instances])
    if result.kind in _MODULAR_KINDS:
        prior = result.model.prior_np(series)
        z_rows = np.empty(n * n_samples, dtype=np.int64)
        for i in range(n):
            for l in range(n_samples):
                rng = np.random.default_rng(np.random.SeedSequence((seed, i, l)))
                z_rows[i * n_samples + l] = nucleus_pick(prior[i], top_p, rng)
        x = nx.constant(series.astype(result.store.dtype))
        cond = result.model.conditioning(x, z_rows)
        caps = result.model.decoder.decode_batch(cond, SampleConfig(mode="greedy"),
                                                 result.vocab)
    else:
        enc = result.model.encoder.encode(nx.constant(series.astype(result.store.dtype)))
        rep = np.repeat(np.arange(n), n_samples)
        cond = nx.embedding(enc, rep)
        rngs = [
            np.random.default_rng(np.random.SeedSequence((seed, i, l)))
            for i in range(n)
            for l in range(n_samples)
        ]
        caps = result.model.decoder.decode_batch(
            cond, SampleConfig(mode="nucleus", top_p=top_p), result.vocab, rngs=rngs
        )
    return [
        [caps[i * n_samples + l].text for l in range(n_samples)] for i in range(n)
    ]


def coverage_curve(result: TrainResult, instances, n_samples=DEFAULT_SAMPLES_PER_INSTANCE,
                   top_p_sweep=DEFAULT_TOP_P_SWEEP, seed=0,
                   lex: HeuristicLexicon | None = None):
    """One CoveragePoint per top_p: correctness over all samples, coverage of
    reference classes by the per-instance sample set."""
    lex = lex or LEXICONS[result.config.lexicon]
    _require_meta(instances)
    points = []
    for top_p in top_p_sweep:
        sampled = _sample_captions(result, instances, n_samples, top_p, seed)
        n_correct = 0
        covered = 0
        total_refs = 0
        for inst, caps in zip(instances, sampled):
            classes = [oracle_parse(c, lex) for c in caps]
            truth = (inst.meta.trend, inst.meta.location)
            n_correct += sum(cls == truth for cls in classes)
            class_set = {cls for cls in classes if cls is not None}
            for ref in inst.captions:
                total_refs += 1
                ref_cls = oracle_parse(ref, lex)
                covered += ref_cls is not None and ref_cls in class_set
        points.append(
            CoveragePoint(
                top_p=top_p,
                correctness=n_correct / (len(instances) * n_samples),
                coverage=covered / total_refs,
            )
        )
    return points


def plot_coverage(curves: dict, path):
    """Coverage vs correctness scatter, one polyline per system."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, points in curves.items():
        xs = [p.coverage for p in points]
        ys = [p.correctness for p in points]
        ax.plot(xs, ys, marker="o", label=name)
        for p in points:
            ax.annotate(f"{p.top_p:g}", (p.coverage, p.correctness), fontsize=7)
    ax.set_xlabel("coverage of reference captions")
    ax.set_ylabel("correctness of samples")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# module analysis, compositionality, length transfer


def module_word_table(result: TrainResult, instances, source="prior",
                      stopwords=None, top_k=10):
    """Most frequent caption words (stop-words removed) attached to each
    module of the per-instance argmax program."""
    if source not in ("prior", "inference"):
        raise ValueError("source must be 'prior' or 'inference'")
    model = result.model
    stopwords = load_stopwords() if stopwords is None else stopwords
    pattern_words: dict[int, Counter] = {}
    locate_words: dict[int, Counter] = {}

    def attach(z: int, texts):
        i, j = model.space.z_pair(z)
        for text in texts:
            toks = [t for t in tokenize_text(text) if t not in stopwords and t.isalpha()]
            pattern_words.setdefault(i, Counter()).update(toks)
            locate_words.setdefault(j, Counter()).update(toks)

    if source == "prior":
        series = np.stack([inst.series for inst in instances])
        z_sel = model.prior_np(series).argmax(axis=1)
        for inst, z in zip(instances, z_sel):
            attach(int(z), inst.captions)
    else:
        if model.inference is None:
            raise ValueError("model was trained without an inference network")
        pairs = [(inst, cap) for inst in instances for cap in inst.captions]
        tokens, mask = encode_batch(result.vocab, [cap for _, cap in pairs])
        q = model.inference.posterior(tokens, mask).data
        for (inst, cap), z in zip(pairs, q.argmax(axis=1)):
            attach(int(z), [cap])

    def top(counters):
        return {k: counters[k].most_common(top_k) for k in sorted(counters)}

    return {"pattern": top(pattern_words), "locate": top(locate_words)}


def composition_eval(result: TrainResult, held_out_instances,
                     lex: HeuristicLexicon | None = None) -> float:
    """Accuracy of the argmax-prior program against the program composed from
    the anchored trend/location modules, on unseen compositions."""
    lex = lex or LEXICONS[result.config.lexicon]
    _require_meta(held_out_instances)
    model = result.model
    series = np.stack([inst.series for inst in held_out_instances])
    z_sel = model.prior_np(series).argmax(axis=1)
    hits = 0
    for inst, z in zip(held_out_instances, z_sel):
        expected = model.space.z_index(*lex.anchored_program(inst.meta.trend, inst.meta.location))
        hits += int(z) == expected
    return hits / len(held_out_instances)


def length_transfer_eval(result: TrainResult, instances,
                         lex: HeuristicLexicon | None = None, threads=1):
    """Oracle correctness on series of a different length, no fine-tuning.
    Fixed-width encoders subsample alternate values first (their adjust rule)."""
    rate, records = correctness(result, instances, lex=lex, threads=threads)
    return rate, records
