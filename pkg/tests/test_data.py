"""Generator contracts, normalization, tokenization, dataset file format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tscap.data import (
    DEFAULT_CLASSES,
    DegenerateWindowError,
    Instance,
    PairedDataset,
    PatternMeta,
    PriceSeries,
    SchemaError,
    Vocabulary,
    all_template_captions,
    convert_released,
    gen_synth_caption,
    gen_synth_dataset,
    gen_synth_series,
    load_dataset,
    load_stock_csv,
    normalize_window,
    sample_stock_windows,
    save_dataset,
    tokenize_text,
    BOS,
    EOS,
    UNK,
    PLACEMENT_WINDOWS,
)


# ---------------------------------------------------------------------------
# synthetic generator


def test_short_series_rejected():
    with pytest.raises(ValueError):
        gen_synth_series("increase", "begin", 5, np.random.default_rng(0))


def test_begin_segment_starts_in_first_forty_percent():
    rng = np.random.default_rng(0)
    for _ in range(200):
        _, meta = gen_synth_series("increase", "begin", 12, rng)
        assert meta.start < 0.4 * 12


def test_decrease_end_segment_is_falling():
    rng = np.random.default_rng(1)
    for _ in range(100):
        values, meta = gen_synth_series("decrease", "end", 12, rng)
        assert meta.segment_values[-1] < meta.segment_values[0]
        # the rise floor guarantees ordering survives the +-2 noise as well
        assert values[meta.start + meta.length - 1] < values[meta.start]


def test_monte_carlo_value_and_noise_ranges():
    rng = np.random.default_rng(2)
    for k in range(1000):
        trend, location = DEFAULT_CLASSES[k % 6]
        values, meta = gen_synth_series(trend, location, 12, rng)
        assert values.min() > 0.0 and values.max() < 100.0
        seg = np.asarray(meta.segment_values)
        clean = np.concatenate(
            [
                np.full(meta.start, seg[0]),
                seg,
                np.full(12 - meta.start - meta.length, seg[-1]),
            ]
        )
        noise = values - clean
        assert noise.min() > -2.0 and noise.max() < 2.0


@pytest.mark.parametrize("location", ["begin", "middle", "end"])
@pytest.mark.parametrize("t", [12, 24])
def test_placement_windows_hold(location, t):
    rng = np.random.default_rng(3)
    lo, hi = PLACEMENT_WINDOWS[location]
    # 10k samples across the two lengths and three windows
    for _ in range(1700):
        _, meta = gen_synth_series("increase", location, t, rng)
        assert meta.length <= t / 3
        assert meta.start >= lo * t
        assert meta.start + meta.length <= hi * t


def test_increase_segment_rises_before_noise():
    rng = np.random.default_rng(4)
    for _ in range(300):
        _, meta = gen_synth_series("increase", "middle", 12, rng)
        assert meta.segment_values[-1] - meta.segment_values[0] > 0
        assert meta.slope > 0
        assert 1.0 < meta.intercept < 20.0


def test_dataset_class_balance_720_over_6():
    ds = gen_synth_dataset(720, 12, seed=0)
    counts = {}
    for inst in ds.instances:
        key = (inst.meta.trend, inst.meta.location)
        counts[key] = counts.get(key, 0) + 1
    assert all(c == 120 for c in counts.values())
    assert len(ds) == 720


def test_dataset_class_balance_four_classes():
    classes = (("increase", "begin"), ("decrease", "end"),
               ("increase", "middle"), ("decrease", "middle"))
    ds = gen_synth_dataset(720, 12, classes=classes, seed=0)
    counts = {}
    for inst in ds.instances:
        counts[(inst.meta.trend, inst.meta.location)] = counts.get(
            (inst.meta.trend, inst.meta.location), 0) + 1
    assert all(c == 180 for c in counts.values())


def test_dataset_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(gen_synth_dataset(60, 12, seed=9), a)
    save_dataset(gen_synth_dataset(60, 12, seed=9), b)
    assert a.read_bytes() == b.read_bytes()
    save_dataset(gen_synth_dataset(60, 12, seed=10), b)
    assert a.read_bytes() != b.read_bytes()


def test_splits_partition_and_no_series_leaks():
    ds = gen_synth_dataset(240, 12, seed=5)
    split_of = {}
    for inst in ds.instances:
        key = tuple(inst.series.tolist())
        assert key not in split_of
        split_of[key] = inst.split
    n = {s: len(ds.split(s)) for s in ("train", "dev", "test")}
    assert n["train"] + n["dev"] + n["test"] == 240
    assert n["dev"] == n["test"] == 24  # 8:1:1


def test_captions_three_per_series_and_word_budget():
    ds = gen_synth_dataset(60, 12, seed=6)
    for inst in ds.instances:
        assert len(inst.captions) == 3
        for cap in inst.captions:
            assert len(cap.split()) <= 9


# ---------------------------------------------------------------------------
# normalization


def test_normalize_endpoints():
    out = normalize_window([5.0, 7.0, 9.0])
    assert out[0] == 0.0 and out[-1] == 100.0


def test_normalize_hand_example():
    # window [2,4] with context covering [0, 8]: min 0, max 8 -> [25, 50]
    out = normalize_window([2.0, 4.0], context_before=[0.0, 1.0], context_after=[8.0])
    np.testing.assert_allclose(out, [25.0, 50.0])


def test_normalize_degenerate_window():
    with pytest.raises(DegenerateWindowError):
        normalize_window([3.0, 3.0], context_before=[3.0], context_after=[3.0])


@settings(max_examples=100, deadline=None)
@given(
    values=st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=20),
    alpha=st.floats(min_value=0.1, max_value=50),
    beta=st.floats(min_value=-100, max_value=100),
)
def test_normalize_affine_invariance(values, alpha, beta):
    arr = np.asarray(values)
    if arr.max() - arr.min() < 1e-6:
        return
    base = normalize_window(arr[1:-1], arr[:1], arr[-1:])
    scaled = alpha * arr + beta
    out = normalize_window(scaled[1:-1], scaled[:1], scaled[-1:])
    np.testing.assert_allclose(out, base, atol=1e-4)


# ---------------------------------------------------------------------------
# stock windows


def _walk(company, granularity, n, seed):
    rng = np.random.default_rng(seed)
    return PriceSeries(company, granularity, 50 + np.cumsum(rng.normal(0, 1, size=n)))


def test_sample_windows_no_overlap_and_range():
    series = [_walk("acme", "daily", 400, 0), _walk("acme", "weekly", 400, 1),
              _walk("globex", "daily", 400, 2)]
    rng = np.random.default_rng(0)
    windows, shortfall = sample_stock_windows(series, 12, 40, rng)
    assert shortfall == 0 and len(windows) == 40
    spans = {}
    for values, prov in windows:
        assert values.min() >= 0.0 and values.max() <= 100.0
        assert len(values) == 12
        key = (prov["company"], prov["granularity"])
        for s in spans.get(key, []):
            assert prov["start"] >= s + 12 or prov["start"] + 12 <= s
        spans.setdefault(key, []).append(prov["start"])


def test_sample_windows_shortfall_warning():
    series = [_walk("tiny", "daily", 40, 3)]
    rng = np.random.default_rng(0)
    windows, shortfall = sample_stock_windows(series, 12, 10, rng)
    assert shortfall > 0
    assert len(windows) <= 3  # 40 values hold at most 3 disjoint windows


def test_load_stock_csv(tmp_path):
    f = tmp_path / "acme_daily.csv"
    f.write_text("date,price\n2020-01-01,10.5\n2020-01-02,11.25\n")
    ps = load_stock_csv(f)
    assert ps.company == "acme" and ps.granularity == "daily"
    np.testing.assert_allclose(ps.values, [10.5, 11.25])


# ---------------------------------------------------------------------------
# tokens and vocabulary


def test_tokenize_splits_punctuation():
    assert tokenize_text("Increases at the end.") == ["increases", "at", "the", "end", "."]


def test_tokenize_empty_caption_errors():
    with pytest.raises(ValueError):
        tokenize_text("   ")


def test_vocab_unknown_token_maps_to_unk():
    vocab = Vocabulary.build(["the stock rises"])
    ids = vocab.encode("the stock plummets").ids
    assert ids[0] == BOS and ids[-1] == EOS
    assert UNK in ids


def test_vocab_encode_caps_length():
    vocab = Vocabulary.build(["word " * 30])
    assert len(vocab.encode("word " * 30).ids) <= 16


def test_vocab_roundtrip_decode():
    vocab = Vocabulary.build(["the stock rises early on"])
    caps = vocab.encode("the stock rises")
    assert vocab.decode(caps.ids) == "the stock rises"


# ---------------------------------------------------------------------------
# dataset files


def _toy_dataset():
    return PairedDataset(
        [
            Instance(
                id="x-0",
                series=np.array([1.0, 2.0, 3.5]),
                captions=["rises at the end"],
                meta=PatternMeta("increase", "end", 1, 2, 0.5, 3.0, [1.0, 2.0]),
                split="train",
            ),
            Instance(
                id="x-1",
                series=np.array([3.0, 2.0, 1.0]),
                captions=["drops early", "falls at the start"],
                meta=None,
                split="test",
            ),
        ]
    )


def test_save_load_roundtrip(tmp_path):
    path = tmp_path / "ds.jsonl"
    ds = _toy_dataset()
    save_dataset(ds, path)
    back = load_dataset(path)
    assert len(back) == len(ds)
    for a, b in zip(ds.instances, back.instances):
        assert a.id == b.id and a.split == b.split and a.captions == b.captions
        np.testing.assert_array_equal(a.series, b.series)
        assert (a.meta is None) == (b.meta is None)
        if a.meta:
            assert a.meta.to_json() == b.meta.to_json()


def test_load_missing_field_names_it(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"id": "a", "captions": [], "meta": None, "split": "train"}) + "\n")
    with pytest.raises(SchemaError, match="series"):
        load_dataset(path)


def test_load_unknown_field_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    rec = {"id": "a", "series": [1, 2], "captions": [], "meta": None,
           "split": "train", "bogus": 1}
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaError, match="bogus"):
        load_dataset(path)


def test_convert_released_preserves_counts(tmp_path):
    released = [
        {"id": "r0", "values": [1, 2, 3], "annotations": ["goes up", "rises"], "split": "train"},
        {"id": "r1", "ts": [3, 2, 1], "sentences": [{"text": "drops"}], "split": "validation"},
        {"id": "r2", "data": [5, 5, 6], "captions": ["flat then up"]},
    ]
    path = tmp_path / "released.json"
    path.write_text(json.dumps(released))
    ds = convert_released(path)
    assert len(ds) == 3
    assert sum(len(inst.captions) for inst in ds.instances) == 4
    assert ds.instances[1].split == "dev"


def test_template_captions_have_one_trend_and_one_location_word():
    from tscap.trainer import SYNTH_LEXICON

    for trend, location in DEFAULT_CLASSES:
        for cap in all_template_captions(trend, location):
            pids, lids = SYNTH_LEXICON.match(tokenize_text(cap))
            assert len(pids) == 1 and len(lids) == 1, cap


def test_caption_generator_draws_from_bank():
    rng = np.random.default_rng(0)
    meta = PatternMeta("decrease", "middle", 4, 3, -1.0, 5.0, [])
    bank = set(all_template_captions("decrease", "middle"))
    for _ in range(50):
        assert gen_synth_caption(meta, rng) in bank
