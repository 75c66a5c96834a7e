"""Text-to-text task collection.

Synthetic tasks are built over a small whitespace-tokenised vocabulary.  Each
family constructs its outputs directly (e.g. a parity example chooses its label
first and then writes a sequence with that parity) while :func:`solve` re-derives
the answer from the input text alone, so the two paths check each other.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
LETTERS = tuple("abcdefghijklmnopqrstuvwxyz")
DIGITS = tuple("0123456789")

CATEGORIES = ("classification", "qa", "generation", "other")
METRICS = ("accuracy", "macro_f1", "exact_match")
SKILLS = ("Extractive", "SentenceCompletion", "Linguistic", "Commonsense",
          "CoReference", "MultiHop", "ImplicitKnowledge", "Synthesize")
GRANULARITY = ("Span", "Sentence", "Paragraph")


class DataError(ValueError):
    pass


class SplitLeakError(DataError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class TaskDataset:
    name: str
    category: str
    sub_category: str
    metric: str
    train: list
    dev: list
    test: list
    features: dict = field(default_factory=dict)
    domain: str = "General"
    granularity: str = "Sentence"
    template: str = ""
    family: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise DataError(f"{self.name}: unknown category {self.category!r}")
        if self.metric not in METRICS:
            raise DataError(f"{self.name}: unknown metric {self.metric!r}")
        if self.category == "classification" and self.metric == "exact_match":
            raise DataError(f"{self.name}: classification tasks use accuracy or macro_f1")
        for split in (self.train, self.dev, self.test):
            for x, y in split:
                if not x.strip() or not y.strip():
                    raise DataError(f"{self.name}: empty text in example {(x, y)!r}")
        check_disjoint(self)

    @property
    def is_classification(self):
        return self.category == "classification"

    def splits(self):
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def labels(self):
        return sorted({y for _, y in self.train + self.dev + self.test})

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return TaskDataset.from_dict(d)

    def to_dict(self):
        return {
            "name": self.name, "category": self.category, "sub_category": self.sub_category,
            "metric": self.metric, "train": [list(p) for p in self.train],
            "dev": [list(p) for p in self.dev], "test": [list(p) for p in self.test],
            "features": dict(self.features), "domain": self.domain,
            "granularity": self.granularity, "template": self.template,
            "family": self.family, "params": self.params,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for s in ("train", "dev", "test"):
            d[s] = [tuple(p) for p in d[s]]
        return cls(**d)


def check_disjoint(task):
    seen = {}
    for split, pairs in task.splits().items():
        for p in set(map(tuple, pairs)):
            if p in seen and seen[p] != split:
                raise SplitLeakError(
                    f"{task.name}: example {p!r} appears in both {seen[p]} and {split}")
            seen[p] = split


# ------------------------------------------------------------------ vocab
class Vocab:
    def __init__(self, tokens):
        tokens = list(SPECIALS) + sorted(set(tokens) - set(SPECIALS))
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def encode(self, text, eos=False):
        ids = [self.stoi.get(t, self.unk_id) for t in text.split()]
        return ids + [self.eos_id] if eos else ids

    def decode(self, ids):
        return " ".join(self.itos[i] for i in ids if i >= len(SPECIALS) or i == self.unk_id)

    @classmethod
    def from_tasks(cls, tasks):
        toks = set()
        for t in tasks:
            for pairs in t.splits().values():
                for x, y in pairs:
                    toks.update(x.split())
                    toks.update(y.split())
            toks.update(t.template.split())
        return cls(toks)


# --------------------------------------------------------------- families
# Each family: (category, sub_category, metric, feature flags, granularity)
FAMILIES = {
    "parity": ("classification", "counting", "macro_f1",
               {"Linguistic"}, "Sentence"),
    "majority": ("classification", "comparison", "accuracy",
                 {"Commonsense"}, "Sentence"),
    "presence": ("classification", "pattern", "macro_f1",
                 {"Linguistic"}, "Span"),
    "same": ("classification", "pair", "accuracy",
             {"CoReference"}, "Paragraph"),
    "span": ("qa", "mrc", "exact_match", {"Extractive"}, "Paragraph"),
    "edge": ("qa", "mrc", "exact_match", {"Extractive"}, "Span"),
    "lookup": ("qa", "closed_book", "exact_match", {"ImplicitKnowledge"}, "Span"),
    "chain": ("qa", "closed_book", "exact_match",
              {"ImplicitKnowledge", "MultiHop"}, "Span"),
    "reverse": ("generation", "transform", "exact_match", {"Synthesize"}, "Sentence"),
    "sort": ("generation", "transform", "exact_match", {"Synthesize", "Commonsense"},
             "Sentence"),
    "double": ("generation", "expand", "exact_match", {"Synthesize"}, "Paragraph"),
    "shift": ("generation", "transform", "exact_match", {"Linguistic", "Synthesize"},
              "Sentence"),
    "howmany": ("other", "counting", "accuracy", {"MultiHop"}, "Sentence"),
    "complete": ("other", "completion", "accuracy", {"SentenceCompletion", "Commonsense"},
                 "Sentence"),
}

DEFAULT_SUITE = {
    "families": {"parity": 3, "majority": 3, "presence": 3, "same": 2,
                 "span": 2, "edge": 2, "lookup": 3, "chain": 1,
                 "reverse": 2, "sort": 2, "double": 1, "shift": 2,
                 "howmany": 2, "complete": 2},
    "length_range": [4, 10],
    "pool_sizes": {"train": 64, "dev": 64, "test": 32},
    "n_test": 6,
}


def _seq(rng, alphabet, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    return [alphabet[k] for k in rng.integers(0, len(alphabet), size=n)]


class _Family:
    """Generator for one task variant: ``make(rng) -> (x, y)``."""

    def __init__(self, family, variant, rng, lo, hi):
        self.family, self.variant = family, variant
        self.lo, self.hi = lo, hi
        alpha = LETTERS if variant % 2 == 0 or family == "complete" else DIGITS
        self.domain = "Letters" if alpha is LETTERS else "Digits"
        self.alpha = alpha
        pick = list(rng.permutation(len(alpha)))
        self.sym = [alpha[k] for k in pick]
        self.params = {"family": family, "variant": variant}
        if family in ("lookup", "chain"):
            keys = [LETTERS[k] for k in rng.permutation(26)[:12]]
            vals = [DIGITS[k] for k in rng.integers(0, 10, size=12)]
            if family == "chain":
                # values are keys again, so a second hop is always defined
                vals = [keys[k] for k in rng.permutation(12)]
            self.params["table"] = dict(zip(keys, vals))
        self.prompt = self._prompt()

    def _prompt(self):
        f, s = self.family, self.sym
        if f == "parity":
            self.params["symbol"] = s[0]
            return f"count {s[0]} :"
        if f == "majority":
            self.params["pair"] = [s[0], s[1]]
            return f"major {s[0]} {s[1]} :"
        if f == "presence":
            self.params["bigram"] = [s[0], s[1]]
            return f"find {s[0]} {s[1]} :"
        if f == "same":
            return "same :"
        if f == "edge":
            self.params["side"] = "first" if self.variant % 2 == 0 else "last"
            return f"{'head' if self.variant % 2 == 0 else 'tail'} :"
        if f == "lookup":
            return f"recall {s[0]} :"
        if f == "chain":
            return f"chain {s[0]} :"
        if f == "howmany":
            self.params["symbol"] = s[0]
            return f"howmany {s[0]} :"
        return f"{f} :"

    def make(self, rng, label=None):
        f, lo, hi = self.family, self.lo, self.hi
        A = self.alpha
        if f == "parity":
            s = self.params["symbol"]
            label = label or ("even" if rng.random() < 0.5 else "odd")
            seq = _seq(rng, [a for a in A if a != s], lo, hi)
            k = int(rng.integers(0, 4)) * 2 + (label == "odd")
            for _ in range(k):
                seq.insert(int(rng.integers(0, len(seq) + 1)), s)
            return " ".join([self.prompt] + seq), label
        if f == "majority":
            a, b = self.params["pair"]
            label = label or ("first" if rng.random() < 0.5 else "second")
            n = int(rng.integers(lo, hi + 1)) | 1
            n_win = int(rng.integers(n // 2 + 1, n + 1))
            win, lose = (a, b) if label == "first" else (b, a)
            seq = [win] * n_win + [lose] * (n - n_win)
            return " ".join([self.prompt] + list(rng.permutation(seq))), label
        if f == "presence":
            a, b = self.params["bigram"]
            label = label or ("yes" if rng.random() < 0.5 else "no")
            while True:
                seq = _seq(rng, A, lo, hi)
                if label == "yes":
                    k = int(rng.integers(0, len(seq) - 1))
                    seq[k], seq[k + 1] = a, b
                has = any(seq[k] == a and seq[k + 1] == b for k in range(len(seq) - 1))
                if has == (label == "yes"):
                    return " ".join([self.prompt] + seq), label
        if f == "same":
            label = label or ("same" if rng.random() < 0.5 else "diff")
            left = _seq(rng, A, 2, max(3, hi // 2))
            right = list(left)
            if label == "diff":
                k = int(rng.integers(0, len(right)))
                right[k] = A[(A.index(right[k]) + 1 + int(rng.integers(0, len(A) - 1))) % len(A)]
            return " ".join([self.prompt] + left + ["|"] + right), label
        if f == "span":
            pre, mid, post = _seq(rng, A, 1, 4), _seq(rng, A, 1, 3), _seq(rng, A, 1, 4)
            return " ".join([self.prompt] + pre + ["["] + mid + ["]"] + post), " ".join(mid)
        if f == "edge":
            seq = _seq(rng, A, lo, hi)
            return " ".join([self.prompt] + seq), seq[0] if self.params["side"] == "first" else seq[-1]
        if f in ("lookup", "chain"):
            table = self.params["table"]
            key = list(table)[int(rng.integers(0, len(table)))]
            noise = _seq(rng, DIGITS, 2, 5)
            ans = table[key] if f == "lookup" else table[table[key]]
            return " ".join([self.prompt] + noise + ["?", key]), ans
        if f == "reverse":
            seq = _seq(rng, A, lo, hi)
            return " ".join([self.prompt] + seq), " ".join(seq[::-1])
        if f == "sort":
            seq = _seq(rng, A, lo, hi)
            return " ".join([self.prompt] + seq), " ".join(sorted(seq, key=A.index))
        if f == "double":
            seq = _seq(rng, A, max(2, lo - 1), max(3, hi - 3))
            return " ".join([self.prompt] + seq), " ".join(t for t in seq for _ in range(2))
        if f == "shift":
            seq = _seq(rng, A, lo, hi)
            return (" ".join([self.prompt] + seq),
                    " ".join(A[(A.index(t) + 1) % len(A)] for t in seq))
        if f == "howmany":
            s = self.params["symbol"]
            k = int(rng.integers(0, 6))
            seq = _seq(rng, [a for a in A if a != s], lo, hi)
            for _ in range(k):
                seq.insert(int(rng.integers(0, len(seq) + 1)), s)
            return " ".join([self.prompt] + seq), str(k)
        if f == "complete":
            step = 1 + (self.variant + int(rng.integers(0, 2))) % 3
            n = int(rng.integers(3, 8))
            start = int(rng.integers(0, len(A)))
            seq = [A[(start + step * k) % len(A)] for k in range(n + 1)]
            return " ".join([self.prompt] + seq[:-1]), seq[-1]
        raise DataError(f"unknown family {f!r}")


def solve(task, x):
    """Rule evaluator: recompute the answer of a synthetic task from its input."""
    p = task.params
    f = p["family"]
    toks = x.split()
    colon = toks.index(":")
    body = toks[colon + 1:]
    alpha = LETTERS if task.domain == "Letters" else DIGITS
    if f == "parity":
        return "odd" if body.count(p["symbol"]) % 2 else "even"
    if f == "majority":
        a, b = p["pair"]
        return "first" if body.count(a) > body.count(b) else "second"
    if f == "presence":
        a, b = p["bigram"]
        return "yes" if any(body[k] == a and body[k + 1] == b
                            for k in range(len(body) - 1)) else "no"
    if f == "same":
        bar = body.index("|")
        return "same" if body[:bar] == body[bar + 1:] else "diff"
    if f == "span":
        return " ".join(body[body.index("[") + 1: body.index("]")])
    if f == "edge":
        return body[0] if p["side"] == "first" else body[-1]
    if f == "lookup":
        return p["table"][body[-1]]
    if f == "chain":
        return p["table"][p["table"][body[-1]]]
    if f == "reverse":
        return " ".join(reversed(body))
    if f == "sort":
        return " ".join(sorted(body, key=alpha.index))
    if f == "double":
        return " ".join(t for t in body for _ in range(2))
    if f == "shift":
        return " ".join(alpha[(alpha.index(t) + 1) % len(alpha)] for t in body)
    if f == "howmany":
        return str(body.count(p["symbol"]))
    if f == "complete":
        step = (alpha.index(body[1]) - alpha.index(body[0])) % len(alpha)
        return alpha[(alpha.index(body[-1]) + step) % len(alpha)]
    raise DataError(f"no rule for family {f!r}")


def load_suite_spec(path):
    spec = json.loads(Path(path).read_text())
    return {**DEFAULT_SUITE, **spec}


def generate_suite(spec=None, rng_seed=0):
    """Deterministic synthetic suite; ``spec`` may override any key of DEFAULT_SUITE."""
    spec = {**DEFAULT_SUITE, **(spec or {})}
    fams = spec["families"]
    cats = {FAMILIES[f][0] for f, c in fams.items() if c > 0}
    if len(cats) < 2:
        raise DataError("suite spec must span at least two categories")
    lo, hi = spec["length_range"]
    sizes = spec["pool_sizes"]
    tasks = []
    for fi, (fam, count) in enumerate(sorted(fams.items())):
        if fam not in FAMILIES:
            raise DataError(f"unknown family {fam!r}")
        for v in range(count):
            rng = np.random.default_rng([rng_seed, fi, v])
            gen = _Family(fam, v, rng, lo, hi)
            tasks.append(_build_task(gen, rng, sizes))
    return tasks


def _build_task(gen, rng, sizes):
    cat, sub, metric, skills, gran = FAMILIES[gen.family]
    need = sum(sizes.values())
    seen, pool = set(), []
    is_cls = cat == "classification"
    labels = None
    if is_cls:
        labels = {"parity": ["even", "odd"], "majority": ["first", "second"],
                  "presence": ["yes", "no"], "same": ["same", "diff"]}[gen.family]
    tries = 0
    while len(pool) < need:
        tries += 1
        if tries > need * 200:
            raise DataError(f"could not generate {need} distinct examples for {gen.family}")
        lab = labels[len(pool) % len(labels)] if labels else None
        x, y = gen.make(rng, lab)
        if x in seen:
            continue
        seen.add(x)
        pool.append((x, y))
    order = rng.permutation(len(pool))
    pool = [pool[k] for k in order]
    a, b = sizes["train"], sizes["train"] + sizes["dev"]
    name = f"{gen.family}_{gen.variant}"
    features = {s: int(s in skills) for s in SKILLS}
    return TaskDataset(
        name=name, category=cat, sub_category=sub, metric=metric,
        train=pool[:a], dev=pool[a:b], test=pool[b:need], features=features,
        domain=gen.domain, granularity=gran, template=gen.prompt + f" {gen.family} task",
        family=gen.family, params=gen.params,
    )


# ------------------------------------------------------------ few-shot
def few_shot_size(task):
    return 16 if task.is_classification else 32


def _stratified(pairs, k, rng, balance):
    if len(pairs) < k:
        raise DataError(f"need {k} examples, only {len(pairs)} available")
    if not balance:
        idx = rng.choice(len(pairs), size=k, replace=False)
        return [pairs[i] for i in sorted(idx)]
    by_label = {}
    for p in pairs:
        by_label.setdefault(p[1], []).append(p)
    labels = sorted(by_label)
    quota = {lab: k // len(labels) for lab in labels}
    for lab in labels[: k % len(labels)]:
        quota[lab] += 1
    out = []
    for lab in labels:
        items = by_label[lab]
        if len(items) < quota[lab]:
            raise DataError(f"label {lab!r}: need {quota[lab]}, have {len(items)}")
        idx = rng.choice(len(items), size=quota[lab], replace=False)
        out.extend(items[i] for i in sorted(idx))
    return [out[i] for i in rng.permutation(len(out))]


def few_shot_subsample(task, rng_seed):
    """16 train/dev examples for classification tasks, 32 otherwise; labels balanced."""
    rng = np.random.default_rng(rng_seed)
    k = few_shot_size(task)
    train = _stratified(task.train, k, rng, task.is_classification)
    dev = _stratified(task.dev, k, rng, task.is_classification)
    return task.replace(train=train, dev=dev)


# ----------------------------------------------------------- partition
@dataclass
class MetaPartition:
    meta_train: list
    meta_test: list

    def to_dict(self):
        return {"meta_train": list(self.meta_train), "meta_test": list(self.meta_test)}


def partition(tasks, n_test, rng_seed):
    """Seeded split; meta-test takes one task per category first, then round-robin."""
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise DataError("task names must be unique")
    if not 0 <= n_test <= len(tasks):
        raise DataError(f"n_test must be in [0, {len(tasks)}]")
    rng = np.random.default_rng(rng_seed)
    by_cat = {}
    for t in tasks:
        by_cat.setdefault(t.category, []).append(t.name)
    queues = {c: [v[k] for k in rng.permutation(len(v))] for c, v in sorted(by_cat.items())}
    test = []
    while len(test) < n_test:
        for c in sorted(queues):
            if queues[c] and len(test) < n_test:
                test.append(queues[c].pop(0))
    test_set = set(test)
    return MetaPartition([n for n in names if n not in test_set],
                         [n for n in names if n in test_set])


# ------------------------------------------------------------- ingestion
MANIFEST_FIELDS = ("name", "category", "metric")


def ingest_jsonl(path, manifest):
    """Load ``{"input", "output"}`` lines into a TaskDataset described by ``manifest``."""
    if isinstance(manifest, (str, Path)):
        manifest = json.loads(Path(manifest).read_text())
    for key in MANIFEST_FIELDS:
        if key not in manifest:
            raise ManifestError(f"manifest missing field {key!r}")
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                x, y = rec["input"], rec["output"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed line ({e})") from None
            if not isinstance(x, str) or not isinstance(y, str):
                raise DataError(f"{path}:{lineno}: input/output must be strings")
            pairs.append((x, y))
    if not pairs:
        raise DataError(f"{path}: no examples")
    ratios = manifest.get("splits", {"train": 0.6, "dev": 0.2, "test": 0.2})
    n = len(pairs)
    n_train = int(round(ratios["train"] * n))
    n_dev = int(round(ratios["dev"] * n))
    n_train, n_dev = min(n_train, n), min(n_dev, n - min(n_train, n))
    feats = manifest.get("features", {})
    return TaskDataset(
        name=manifest["name"], category=manifest["category"],
        sub_category=manifest.get("sub_category", manifest["category"]),
        metric=manifest["metric"], train=pairs[:n_train],
        dev=pairs[n_train:n_train + n_dev], test=pairs[n_train + n_dev:],
        features={s: int(bool(feats.get(s, 0))) for s in SKILLS},
        domain=manifest.get("domain", "General"),
        granularity=manifest.get("granularity", "Sentence"),
        template=manifest.get("template", ""), family="ingested", params={},
    )


# --------------------------------------------------------- feature table
@dataclass
class FeatureTable:
    names: list
    tasks: list
    matrix: np.ndarray  # (t, |tasks|), entries in {0, 1}

    def column(self, name):
        return self.matrix[self.names.index(name)]

    def to_dict(self):
        return {"names": self.names, "tasks": self.tasks, "matrix": self.matrix.tolist()}


def _avg_len(pairs, which):
    return float(np.mean([len(p[which].split()) for p in pairs]))


def build_feature_table(tasks):
    """Binary feature matrix over ``tasks`` (features x tasks)."""
    rows = {}
    names = [t.name for t in tasks]

    def put(fname, k, v=1):
        rows.setdefault(fname, np.zeros(len(tasks), dtype=np.int64))[k] = v

    top = {"classification": "Classification", "qa": "QuestionAnswering",
           "generation": "ConditionalGeneration", "other": "Others"}
    for c in CATEGORIES:
        rows[top[c]] = np.zeros(len(tasks), dtype=np.int64)
    in_len = np.array([_avg_len(t.train + t.dev + t.test, 0) for t in tasks])
    out_len = np.array([_avg_len(t.train + t.dev + t.test, 1) for t in tasks])
    lo_q, hi_q = (np.quantile(in_len, [0.25, 0.75]) if len(tasks) else (0, 0))
    for fname in ("hasShortInput", "hasMediumInput", "hasLongInput",
                  "hasShortOutput", "hasMediumOutput", "hasLongOutput"):
        rows[fname] = np.zeros(len(tasks), dtype=np.int64)
    for k, t in enumerate(tasks):
        put(top[t.category], k)
        put(f"{t.category}/{t.sub_category}", k)
        # strict comparisons: quartile ties resolve to medium
        if in_len[k] < lo_q:
            put("hasShortInput", k)
        elif in_len[k] > hi_q:
            put("hasLongInput", k)
        else:
            put("hasMediumInput", k)
        if out_len[k] < 3:
            put("hasShortOutput", k)
        elif out_len[k] > 10:
            put("hasLongOutput", k)
        else:
            put("hasMediumOutput", k)
        put(f"domain:{t.domain}", k)
        put(f"granularity:{t.granularity}", k)
        for s in SKILLS:
            rows.setdefault(s, np.zeros(len(tasks), dtype=np.int64))
            if t.features.get(s):
                put(s, k)
    lengths = ["hasShortInput", "hasMediumInput", "hasLongInput",
               "hasShortOutput", "hasMediumOutput", "hasLongOutput"]
    fnames = ([top[c] for c in CATEGORIES]
              + sorted(f for f in rows if "/" in f) + lengths
              + sorted(f for f in rows if f.startswith("domain:"))
              + sorted(f for f in rows if f.startswith("granularity:"))
              + list(SKILLS))
    return FeatureTable(fnames, names, np.stack([rows[f] for f in fnames]))


def save_tasks(tasks, path):
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks]))


def load_tasks(path):
    return [TaskDataset.from_dict(d) for d in json.loads(Path(path).read_text())]


def encode_pairs(vocab, pairs, max_len=None):
    """Padded ``(inputs, targets)`` id arrays; both sequences end with eos."""
    if not pairs:
        raise DataError("no examples to encode")
    xs = [vocab.encode(x, eos=True) for x, _ in pairs]
    ys = [vocab.encode(y, eos=True) for _, y in pairs]
    longest = max(max(map(len, xs)), max(map(len, ys)))
    if max_len is not None and longest > max_len:
        raise DataError(f"example of {longest} tokens exceeds max_len {max_len}")

    def pad(seqs):
        out = np.full((len(seqs), max(map(len, seqs))), vocab.pad_id, dtype=np.int64)
        for r, s in enumerate(seqs):
            out[r, :len(s)] = s
        return out

    return pad(xs), pad(ys)
