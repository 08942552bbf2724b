"""Oracle parsing, correctness, coverage mechanics, analysis tables."""

from types import SimpleNamespace

import numpy as np
import pytest

import tscap.numerics as nx
from tscap.baselines import BaselineModel
from tscap.data import (
    CaptionTokens,
    DEFAULT_CLASSES,
    Vocabulary,
    all_template_captions,
    gen_synth_dataset,
)
from tscap.evals import (
    CoveragePoint,
    correctness,
    coverage_curve,
    composition_eval,
    load_stopwords,
    metric_report,
    module_word_table,
    oracle_parse,
    perplexity,
    plot_coverage,
)
from tscap.trainer import SYNTH_LEXICON, STOCK_LEXICON, TrainConfig, TrainResult, train


@pytest.fixture(scope="module")
def tiny_result():
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, n_pattern=2, n_locate=3,
                      module_embed=3, conv_channels=2, n_components=3,
                      hidden=6, token_embed=6)
    return train(cfg, gen_synth_dataset(60, 9, seed=0))


@pytest.fixture(scope="module")
def tiny_dataset():
    return gen_synth_dataset(60, 9, seed=0)


# ---------------------------------------------------------------------------
# oracle


def test_oracle_parse_examples():
    assert oracle_parse("dips near the end", STOCK_LEXICON) == ("decrease", "end")
    assert oracle_parse("dips near the end", SYNTH_LEXICON) == ("decrease", "end")
    assert oracle_parse("stock is volatile", SYNTH_LEXICON) is None
    assert oracle_parse("rises then falls late", SYNTH_LEXICON) is None


def test_oracle_roundtrips_every_template():
    for trend, location in DEFAULT_CLASSES:
        for cap in all_template_captions(trend, location):
            assert oracle_parse(cap, SYNTH_LEXICON) == (trend, location), cap


def test_oracle_trendless_stock_keyword_is_none():
    # 'flat' anchors a module id but maps to no trend
    assert oracle_parse("flat throughout", STOCK_LEXICON) is None


# ---------------------------------------------------------------------------
# correctness


class _PerfectModel:
    """Emits the template caption matching each instance's annotation."""

    def __init__(self, instances):
        self.by_key = {
            inst.series.tobytes(): all_template_captions(inst.meta.trend, inst.meta.location)[0]
            for inst in instances
        }

    def greedy_captions(self, series, cfg=None, rng=None, z_override=None):
        caps = [
            CaptionTokens(ids=[], text=self.by_key[np.asarray(row).tobytes()])
            for row in series
        ]
        return caps, np.zeros(len(caps), dtype=int), None


def _stub_result(model, kind="modular", vocab=None):
    return SimpleNamespace(kind=kind, model=model, config=TrainConfig(), vocab=vocab,
                           store=nx.ParameterStore())


def test_correctness_perfect_model_is_one(tiny_dataset):
    insts = tiny_dataset.split("test")
    rate, records = correctness(_stub_result(_PerfectModel(insts)), insts)
    assert rate == 1.0
    assert all(r["correct"] for r in records)


def test_correctness_requires_meta(tiny_dataset):
    insts = [inst for inst in tiny_dataset.split("test")]
    insts[0].meta, saved = None, insts[0].meta
    try:
        with pytest.raises(ValueError, match="metadata"):
            correctness(_stub_result(_PerfectModel(insts[1:])), insts)
    finally:
        insts[0].meta = saved


def test_correctness_threads_match_serial(tiny_result, tiny_dataset):
    insts = tiny_dataset.split("dev")
    r1, _ = correctness(tiny_result, insts, threads=1)
    r2, _ = correctness(tiny_result, insts, threads=3)
    assert r1 == r2


# ---------------------------------------------------------------------------
# perplexity


def test_perplexity_uniform_decoder_equals_vocab_size(tiny_dataset):
    insts = tiny_dataset.split("dev")
    vocab = Vocabulary.build(c for inst in insts for c in inst.captions)
    store = nx.ParameterStore()
    model = BaselineModel("conv", store, TrainConfig(hidden=6, token_embed=6), vocab,
                          np.random.default_rng(0), series_len=9)
    for _, tensor in store.items():
        tensor.data[...] = 0.0
    result = TrainResult(store=store, model=model, vocab=vocab,
                         config=TrainConfig(), kind="conv")
    ppl = perplexity(result, insts)
    assert ppl == pytest.approx(len(vocab), rel=1e-4)


def test_perplexity_marginalizes_for_program_model(tiny_result, tiny_dataset):
    ppl = perplexity(tiny_result, tiny_dataset.split("dev"))
    assert np.isfinite(ppl) and ppl >= 1.0


# ---------------------------------------------------------------------------
# metric report


def test_metric_report_fields(tiny_result, tiny_dataset):
    report = metric_report(tiny_result, tiny_dataset.split("dev"))
    for v in (report.bleu3, report.bleu4, report.rouge_l):
        assert 0.0 <= v <= 1.0
    assert 0.0 <= report.cider / 10.0 <= 1.0
    assert report.perplexity >= 1.0
    assert report.correctness is not None
    assert len(report.per_instance) == len(tiny_dataset.split("dev"))
    assert any("cider" in n for n in report.notes)


def test_metric_report_marks_unscoreable_correctness(tiny_result, tiny_dataset):
    insts = [inst for inst in tiny_dataset.split("dev")]
    saved = insts[0].meta
    insts[0].meta = None
    try:
        report = metric_report(tiny_result, insts)
        assert report.correctness is None
        assert any("not machine-checkable" in n for n in report.notes)
    finally:
        insts[0].meta = saved


# ---------------------------------------------------------------------------
# coverage


def test_coverage_l1_tiny_top_p_equals_correctness(tiny_result, tiny_dataset):
    insts = tiny_dataset.split("dev")
    rate, _ = correctness(tiny_result, insts)
    points = coverage_curve(tiny_result, insts, n_samples=1, top_p_sweep=(1e-9,), seed=0)
    assert points[0].correctness == rate


def test_coverage_monotone_in_sample_count(tiny_result, tiny_dataset):
    insts = tiny_dataset.split("dev")
    for top_p in (0.5, 1.0):
        small = coverage_curve(tiny_result, insts, n_samples=4, top_p_sweep=(top_p,), seed=3)
        large = coverage_curve(tiny_result, insts, n_samples=8, top_p_sweep=(top_p,), seed=3)
        assert large[0].coverage >= small[0].coverage - 1e-12


def test_coverage_well_formed(tiny_result, tiny_dataset):
    pts = coverage_curve(tiny_result, tiny_dataset.split("dev"), n_samples=3,
                         top_p_sweep=(0.5, 1.0), seed=1)
    for p in pts:
        assert 0.0 <= p.correctness <= 1.0
        assert 0.0 <= p.coverage <= 1.0


def test_plot_coverage_writes_file(tmp_path):
    pts = [CoveragePoint(0.3, 0.9, 0.4), CoveragePoint(1.0, 0.7, 0.8)]
    out = tmp_path / "cov.png"
    plot_coverage({"modular": pts}, out)
    assert out.stat().st_size > 0


# ---------------------------------------------------------------------------
# analysis tables


def test_module_word_table_excludes_stopwords(tiny_result, tiny_dataset):
    stop = load_stopwords()
    assert len(stop) == 50
    for source in ("prior", "inference"):
        table = module_word_table(tiny_result, tiny_dataset.split("dev"), source=source)
        for side in ("pattern", "locate"):
            for words in table[side].values():
                assert all(w not in stop for w, _ in words)


def test_module_word_table_rejects_bad_source(tiny_result, tiny_dataset):
    with pytest.raises(ValueError):
        module_word_table(tiny_result, tiny_dataset.split("dev"), source="decoder")


# ---------------------------------------------------------------------------
# composition


class _FixedPriorModel:
    def __init__(self, space, z):
        self.space = space
        self._z = z

    def prior_np(self, series):
        out = np.zeros((len(series), self.space.n_programs))
        out[:, self._z] = 1.0
        return out


def test_composition_eval_counts_anchored_hits(tiny_dataset):
    import tscap.modules as modules

    store = nx.ParameterStore()
    space = modules.ProgramSpace(store, np.random.default_rng(0), n_pattern=2, n_locate=3)
    held = [inst for inst in tiny_dataset.instances if
            (inst.meta.trend, inst.meta.location) == ("increase", "end")][:10]
    z_right = space.z_index(*SYNTH_LEXICON.anchored_program("increase", "end"))
    good = SimpleNamespace(kind="modular", config=TrainConfig(),
                           model=SimpleNamespace(space=space,
                                                 prior_np=_FixedPriorModel(space, z_right).prior_np))
    assert composition_eval(good, held) == 1.0
    z_wrong = (z_right + 1) % space.n_programs
    bad = SimpleNamespace(kind="modular", config=TrainConfig(),
                          model=SimpleNamespace(space=space,
                                                prior_np=_FixedPriorModel(space, z_wrong).prior_np))
    assert composition_eval(bad, held) == 0.0
