"""Datasets: synthetic trend-segment series, stock-window ingestion, captions.

The canonical on-disk format is line-delimited JSON, one record per series:
``{"id", "series": [...], "captions": [...], "meta": {...}|null, "split"}``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRENDS = ("increase", "decrease")
LOCATIONS = ("begin", "middle", "end")
DEFAULT_CLASSES = tuple((tr, lo) for tr in TRENDS for lo in LOCATIONS)

# (low, high) fractions of T that must contain the whole segment
PLACEMENT_WINDOWS = {
    "begin": (0.0, 0.4),
    "middle": (0.3, 0.7),
    "end": (0.6, 1.0),
}

# generation bounds: values must survive +-2 noise inside (0, 100)
_VALUE_CEIL = 97.5
_MIN_RISE = 10.0


class SchemaError(ValueError):
    """A dataset record violates the canonical schema."""


class DegenerateWindowError(ValueError):
    """Window plus context is constant; normalization undefined."""


@dataclass
class PatternMeta:
    """Ground truth for one synthetic series."""

    trend: str
    location: str
    start: int
    length: int
    slope: float
    intercept: float
    segment_values: list[float] = field(default_factory=list)

    def to_json(self):
        return {
            "trend": self.trend,
            "location": self.location,
            "start": self.start,
            "length": self.length,
            "slope": self.slope,
            "intercept": self.intercept,
            "segment_values": self.segment_values,
        }

    @classmethod
    def from_json(cls, obj):
        for key in ("trend", "location", "start", "length", "slope", "intercept"):
            if key not in obj:
                raise SchemaError(f"meta record missing field '{key}'")
        return cls(
            trend=obj["trend"],
            location=obj["location"],
            start=int(obj["start"]),
            length=int(obj["length"]),
            slope=float(obj["slope"]),
            intercept=float(obj["intercept"]),
            segment_values=[float(v) for v in obj.get("segment_values", [])],
        )


@dataclass
class Instance:
    id: str
    series: np.ndarray
    captions: list[str]
    meta: PatternMeta | None
    split: str


@dataclass
class PairedDataset:
    instances: list[Instance]

    def split(self, name: str) -> list[Instance]:
        return [inst for inst in self.instances if inst.split == name]

    def __len__(self):
        return len(self.instances)


# ---------------------------------------------------------------------------
# synthetic series


def gen_synth_series(trend, location, t, rng, max_tries=100):
    """One synthetic series with a single linear trend segment.

    The segment is a line sampled on ``length`` random integer inputs (slope
    in (0,2) signed by trend, intercept in (1,20)), placed inside the
    location's window; points outside the segment repeat the nearest segment
    endpoint, i.i.d. U(-2,2) noise is added, and any draw that escapes
    (0,100) or rises less than 10 is rejected and redrawn.
    """
    if t < 6:
        raise ValueError(f"series length must be >= 6, got {t}")
    if trend not in TRENDS or location not in LOCATIONS:
        raise ValueError(f"unknown class ({trend}, {location})")
    lo_frac, hi_frac = PLACEMENT_WINDOWS[location]
    for _ in range(max_tries):
        length = int(rng.integers(2, t // 3, endpoint=True))
        start_min = math.ceil(lo_frac * t)
        start_max = math.floor(hi_frac * t - length)
        if start_max < start_min:
            continue
        start = int(rng.integers(start_min, start_max, endpoint=True))
        slope = float(rng.uniform(0.0, 2.0))
        intercept = float(rng.uniform(1.0, 20.0))
        if slope < 1e-3:
            continue
        x_cap = int((_VALUE_CEIL - intercept) / slope)
        if x_cap + 1 < length:
            continue
        xs = np.sort(rng.choice(x_cap + 1, size=length, replace=False))
        segment = slope * xs + intercept
        if segment[-1] - segment[0] < _MIN_RISE:
            continue
        if trend == "decrease":
            segment = segment[::-1]
        clean = np.concatenate(
            [
                np.full(start, segment[0]),
                segment,
                np.full(t - start - length, segment[-1]),
            ]
        )
        values = clean + rng.uniform(-2.0, 2.0, size=t)
        if values.min() <= 0.0 or values.max() >= 100.0:
            continue
        meta = PatternMeta(
            trend=trend,
            location=location,
            start=start,
            length=length,
            slope=slope if trend == "increase" else -slope,
            intercept=intercept,
            segment_values=[float(v) for v in segment],
        )
        return values, meta
    raise RuntimeError(f"could not place ({trend}, {location}) segment in {max_tries} tries")


# ---------------------------------------------------------------------------
# template captions

_SUBJECTS = ("stock", "price", "value")
_ADJECTIVES = ("sharp", "clear", "steady")

TREND_VERBS = {
    "increase": ("increases", "rises", "climbs", "grows"),
    "decrease": ("decreases", "declines", "dips", "falls"),
}
TREND_NOUNS = {
    "increase": ("increase", "rise", "climb"),
    "decrease": ("decrease", "decline", "dip", "drop"),
}
LOCATION_PHRASES = {
    "begin": ("at the beginning", "at the start", "early on"),
    "middle": ("in the middle", "halfway through", "around the midpoint"),
    "end": ("at the end", "late in the series", "towards the end"),
}

# each frame uses exactly one trend word and one location phrase
_FRAMES = (
    "the {subj} {verb} {loc}",
    "{loc} the {subj} {verb}",
    "there is a {noun} {loc}",
    "a {adj} {noun} {loc}",
    "it {verb} {loc}",
    "the {subj} shows a {noun} {loc}",
)


def gen_synth_caption(meta: PatternMeta, rng) -> str:
    frame = _FRAMES[rng.integers(len(_FRAMES))]
    words = {
        "subj": _SUBJECTS[rng.integers(len(_SUBJECTS))],
        "adj": _ADJECTIVES[rng.integers(len(_ADJECTIVES))],
        "verb": TREND_VERBS[meta.trend][rng.integers(len(TREND_VERBS[meta.trend]))],
        "noun": TREND_NOUNS[meta.trend][rng.integers(len(TREND_NOUNS[meta.trend]))],
        "loc": LOCATION_PHRASES[meta.location][rng.integers(len(LOCATION_PHRASES[meta.location]))],
    }
    return frame.format(**words)


def all_template_captions(trend, location):
    """Every caption the template bank can emit for one class."""
    out = []
    for frame in _FRAMES:
        subjects = _SUBJECTS if "{subj}" in frame else ("",)
        adjs = _ADJECTIVES if "{adj}" in frame else ("",)
        verbs = TREND_VERBS[trend] if "{verb}" in frame else ("",)
        nouns = TREND_NOUNS[trend] if "{noun}" in frame else ("",)
        for subj in subjects:
            for adj in adjs:
                for verb in verbs:
                    for noun in nouns:
                        for loc in LOCATION_PHRASES[location]:
                            out.append(
                                frame.format(subj=subj, adj=adj, verb=verb, noun=noun, loc=loc)
                            )
    return out


def gen_synth_dataset(n, t, classes=DEFAULT_CLASSES, seed=0, captions_per=3) -> PairedDataset:
    """Class-balanced synthetic corpus with template captions, split 8:1:1.

    Splits are stratified per class so every class appears in every split.
    Deterministic: the same seed yields a byte-identical saved file.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not classes:
        raise ValueError("class list must not be empty")
    counts = [n // len(classes) + (1 if i < n % len(classes) else 0) for i in range(len(classes))]
    streams = np.random.SeedSequence(seed).spawn(n)
    instances = []
    idx = 0
    for (trend, location), count in zip(classes, counts):
        n_test = count // 10
        n_dev = count // 10
        for j in range(count):
            rng = np.random.default_rng(streams[idx])
            values, meta = gen_synth_series(trend, location, t, rng)
            captions = [gen_synth_caption(meta, rng) for _ in range(captions_per)]
            split = "test" if j < n_test else "dev" if j < n_test + n_dev else "train"
            instances.append(
                Instance(
                    id=f"synth-{idx:04d}",
                    series=values,
                    captions=captions,
                    meta=meta,
                    split=split,
                )
            )
            idx += 1
    return PairedDataset(instances)


# ---------------------------------------------------------------------------
# stock ingestion


def normalize_window(window, context_before=(), context_after=()):
    """Scale a window to [0, 100] using min/max over window plus context."""
    window = np.asarray(window, dtype=np.float64)
    if window.size == 0:
        raise ValueError("window must be nonempty")
    extended = np.concatenate(
        [np.asarray(context_before, dtype=np.float64), window, np.asarray(context_after, dtype=np.float64)]
    )
    lo, hi = extended.min(), extended.max()
    if hi == lo:
        raise DegenerateWindowError("window plus context is constant")
    # clip guards against float drift a hair past the endpoints
    return np.clip(100.0 * (window - lo) / (hi - lo), 0.0, 100.0)


@dataclass
class PriceSeries:
    company: str
    granularity: str
    values: np.ndarray


def load_stock_csv(path) -> PriceSeries:
    """Read one ``date,price`` CSV; company and granularity come from the
    file name, ``<company>_<granularity>.csv``."""
    path = Path(path)
    stem = path.stem
    if "_" not in stem:
        raise ValueError(f"stock csv name must be <company>_<granularity>.csv, got {path.name}")
    company, granularity = stem.rsplit("_", 1)
    prices = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.lower().startswith("date"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path.name}:{lineno}: expected 'date,price'")
            prices.append(float(parts[1]))
    return PriceSeries(company, granularity, np.asarray(prices, dtype=np.float64))


def sample_stock_windows(price_series, t, count, rng, context=10, max_tries_factor=20):
    """Draw ``count`` normalized, pairwise non-overlapping windows.

    Company is chosen uniformly, then granularity with equal probability among
    those available for it. Returns ``(windows, shortfall)`` where shortfall
    counts windows that could not be placed without overlap.
    """
    by_company: dict[str, list[PriceSeries]] = {}
    for ps in price_series:
        if len(ps.values) < t + 2 * context:
            raise ValueError(
                f"price series {ps.company}/{ps.granularity} shorter than T + {2 * context}"
            )
        by_company.setdefault(ps.company, []).append(ps)
    companies = sorted(by_company)
    taken: dict[int, list[tuple[int, int]]] = {}
    windows = []
    tries = 0
    while len(windows) < count and tries < count * max_tries_factor:
        tries += 1
        company = companies[rng.integers(len(companies))]
        series_list = by_company[company]
        ps = series_list[rng.integers(len(series_list))]
        key = id(ps)
        start = int(rng.integers(0, len(ps.values) - t, endpoint=True))
        if any(start < e and s < start + t for s, e in taken.get(key, [])):
            continue
        window = ps.values[start : start + t]
        before = ps.values[max(0, start - context) : start]
        after = ps.values[start + t : start + t + context]
        try:
            normalized = normalize_window(window, before, after)
        except DegenerateWindowError:
            continue
        taken.setdefault(key, []).append((start, start + t))
        windows.append(
            (
                normalized,
                {"company": ps.company, "granularity": ps.granularity, "start": start},
            )
        )
    return windows, count - len(windows)


# ---------------------------------------------------------------------------
# tokens and vocabulary

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PAD, BOS, EOS, UNK = 0, 1, 2, 3
MAX_CAPTION_IDS = 16


def tokenize_text(text: str) -> list[str]:
    """Lowercase, split on whitespace; punctuation becomes its own token."""
    if not text or not text.strip():
        raise ValueError("empty caption")
    return _TOKEN_RE.findall(text.lower())


@dataclass
class CaptionTokens:
    ids: list[int]
    text: str


class Vocabulary:
    """Token/id map with PAD, BOS, EOS, UNK sentinels at fixed positions."""

    specials = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, tokens):
        self.itos = list(self.specials) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @classmethod
    def build(cls, captions) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in captions:
            for tok in tokenize_text(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
        return cls(ordered)

    def encode(self, text: str) -> CaptionTokens:
        toks = tokenize_text(text)[: MAX_CAPTION_IDS - 2]
        ids = [BOS] + [self.stoi.get(tok, UNK) for tok in toks] + [EOS]
        return CaptionTokens(ids=ids, text=text)

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            words.append(self.itos[int(i)])
        return " ".join(words)

    def to_json(self):
        return self.itos[len(self.specials) :]

    @classmethod
    def from_json(cls, tokens):
        return cls(tokens)


def build_vocab(train_captions) -> Vocabulary:
    return Vocabulary.build(train_captions)


# ---------------------------------------------------------------------------
# canonical dataset files

_RECORD_FIELDS = ("id", "series", "captions", "meta", "split")


def save_dataset(dataset: PairedDataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for inst in dataset.instances:
            record = {
                "id": inst.id,
                "series": [float(v) for v in inst.series],
                "captions": list(inst.captions),
                "meta": inst.meta.to_json() if inst.meta is not None else None,
                "split": inst.split,
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> PairedDataset:
    instances = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            for key in _RECORD_FIELDS:
                if key not in obj:
                    raise SchemaError(f"line {lineno}: missing field '{key}'")
            extra = set(obj) - set(_RECORD_FIELDS)
            if extra:
                raise SchemaError(f"line {lineno}: unknown field '{sorted(extra)[0]}'")
            if obj["split"] not in ("train", "dev", "test"):
                raise SchemaError(f"line {lineno}: bad value for field 'split'")
            meta = PatternMeta.from_json(obj["meta"]) if obj["meta"] is not None else None
            instances.append(
                Instance(
                    id=str(obj["id"]),
                    series=np.asarray(obj["series"], dtype=np.float64),
                    captions=[str(c) for c in obj["captions"]],
                    meta=meta,
                    split=obj["split"],
                )
            )
    return PairedDataset(instances)


_SERIES_KEYS = ("series", "values", "ts", "data")
_CAPTION_KEYS = ("captions", "annotations", "sentences", "texts")


def convert_released(path, default_split="train") -> PairedDataset:
    """Map an externally released corpus file onto the canonical format.

    Accepts a JSON array or JSON-lines file; picks the series under any of
    ``series/values/ts/data`` and captions under ``captions/annotations/
    sentences/texts`` (strings or ``{"text": ...}`` objects), 1:1 per record.
    """
    path = Path(path)
    raw = path.read_text()
    try:
        records = json.loads(raw)
        if isinstance(records, dict):  # e.g. {"train": [...], "test": [...]}
            flat = []
            for split_name, items in records.items():
                for item in items:
                    item = dict(item)
                    item.setdefault("split", split_name)
                    flat.append(item)
            records = flat
    except json.JSONDecodeError:
        records = [json.loads(line) for line in raw.splitlines() if line.strip()]
    instances = []
    for i, rec in enumerate(records):
        series_key = next((k for k in _SERIES_KEYS if k in rec), None)
        if series_key is None:
            raise SchemaError(f"record {i}: no series field (tried {_SERIES_KEYS})")
        caption_key = next((k for k in _CAPTION_KEYS if k in rec), None)
        captions = rec.get(caption_key, []) if caption_key else []
        captions = [c["text"] if isinstance(c, dict) else str(c) for c in captions]
        split = rec.get("split", default_split)
        if split not in ("train", "dev", "test"):
            split = {"val": "dev", "valid": "dev", "validation": "dev"}.get(split, default_split)
        instances.append(
            Instance(
                id=str(rec.get("id", i)),
                series=np.asarray(rec[series_key], dtype=np.float64),
                captions=captions,
                meta=None,
                split=split,
            )
        )
    return PairedDataset(instances)
