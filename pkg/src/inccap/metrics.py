"""Caption metrics: corpus BLEU, ROUGE-L, CIDEr and a WordNet-free METEOR.

Every scorer takes a sequence of :class:`EvalPair` (or ``(candidate, references)``
tuples) of already-tokenized captions and returns a corpus score multiplied by
``scale`` (100 by default, the percent scale used in captioning tables).

``meteor_lite`` only knows exact and suffix-stem matches, so its absolute values
are not comparable to the official METEOR; trends are.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .errors import ConfigurationError


@dataclass(frozen=True)
class EvalPair:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise ValueError("an EvalPair needs at least one reference")


def _pairs(pairs) -> list[EvalPair]:
    return [p if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------- BLEU


def bleu(pairs, n: int = 4, scale: float = 100.0) -> float:
    """Corpus BLEU-n: clipped n-gram precisions, uniform weights, closest-length brevity penalty."""
    if n not in (1, 4):
        raise ConfigurationError(f"BLEU order must be 1 or 4, got {n}")
    pairs = _pairs(pairs)
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for p in pairs:
        c = len(p.candidate)
        cand_len += c
        ref_len += min((abs(len(r) - c), len(r)) for r in p.references)[1]
        for k in range(1, n + 1):
            counts = ngrams(p.candidate, k)
            best: Counter = Counter()
            for r in p.references:
                best |= ngrams(r, k)
            matched[k - 1] += sum(min(cnt, best[g]) for g, cnt in counts.items())
            total[k - 1] += max(0, c - k + 1)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return scale * bp * math.exp(log_prec)


# --------------------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate, reference, beta: float = 1.2) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(candidate), lcs / len(reference)
    return (1 + beta**2) * prec * rec / (rec + beta**2 * prec)


def rouge_l(pairs, beta: float = 1.2, scale: float = 100.0) -> float:
    """Mean over pairs of the best LCS F-measure against any reference."""
    pairs = _pairs(pairs)
    if not pairs:
        return 0.0
    total = sum(max(rouge_l_pair(p.candidate, r, beta) for r in p.references) for p in pairs)
    return scale * total / len(pairs)


# --------------------------------------------------------------------------- CIDEr


def document_frequency(corpus_refs: Iterable[Sequence[Sequence[str]]], max_n: int = 4) -> Counter:
    """Number of images whose reference set contains each n-gram (n = 1..max_n)."""
    df: Counter = Counter()
    for refs in corpus_refs:
        seen = set()
        for r in refs:
            for k in range(1, max_n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    return df


def _tfidf(tokens, k, df, log_n):
    counts = ngrams(tokens, k)
    total = sum(counts.values()) or 1
    return {g: (c / total) * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}


def _cosine(a: Mapping, b: Mapping) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(pairs, corpus_refs=None, max_n: int = 4, scale: float = 100.0) -> float:
    """Plain CIDEr (no length penalty, no clipping), times 10, times ``scale``.

    Document frequencies come from ``corpus_refs`` (one reference list per image);
    by default the pairs' own references.
    """
    pairs = _pairs(pairs)
    if not pairs:
        return 0.0
    if corpus_refs is None:
        corpus_refs = [p.references for p in pairs]
    corpus_refs = list(corpus_refs)
    df = document_frequency(corpus_refs, max_n)
    log_n = math.log(len(corpus_refs))
    total = 0.0
    for p in pairs:
        score = 0.0
        for k in range(1, max_n + 1):
            vc = _tfidf(p.candidate, k, df, log_n)
            score += sum(_cosine(vc, _tfidf(r, k, df, log_n)) for r in p.references) / len(p.references)
        total += 10.0 * score / max_n
    return scale * total / len(pairs)


# --------------------------------------------------------------------------- METEOR-lite

_SUFFIXES = ("ing", "es", "ed", "s")


def stem(token: str, min_stem: int = 3) -> str:
    """Strip one of -ing/-es/-ed/-s when at least ``min_stem`` characters remain."""
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= min_stem:
            return token[: -len(suf)]
    return token


def count_chunks(alignment: Iterable[tuple[int, int]]) -> int:
    """Runs of pairs adjacent in both candidate and reference order."""
    chunks, last = 0, None
    for i, j in sorted(alignment):
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def _class_options(cand_pos, ref_pos, candidate, reference):
    """Maximum matchings inside one stem class that also maximize exact matches."""
    small, big, flip = (cand_pos, ref_pos, False) if len(cand_pos) <= len(ref_pos) else (ref_pos, cand_pos, True)
    options = []
    for chosen in itertools.permutations(big, len(small)):
        pairs = [(b, a) if flip else (a, b) for a, b in zip(small, chosen)]
        exact = sum(candidate[i] == reference[j] for i, j in pairs)
        options.append((exact, tuple(sorted(pairs))))
    best = max(e for e, _ in options)
    return sorted({pairs for e, pairs in options if e == best})


def _greedy_class(cand_pos, ref_pos, candidate, reference):
    # exact matches first, each in left-to-right order
    pairs, used_c, used_r = [], set(), set()
    for want_exact in (True, False):
        for i in cand_pos:
            if i in used_c:
                continue
            for j in ref_pos:
                if j not in used_r and (candidate[i] == reference[j]) == want_exact:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return tuple(sorted(pairs))


def align(candidate: Sequence[str], reference: Sequence[str], max_search: int = 20000) -> tuple[tuple[int, int], ...]:
    """One-to-one unigram alignment.

    Tokens match when they share a stem (exact equality implies that).  The
    alignment maximizes the number of matches, then the number of exact matches,
    then minimizes chunks; ties go to the lexicographically smallest pair list.
    When the search space exceeds ``max_search`` combinations each stem class is
    aligned greedily left to right instead.
    """
    cand_classes: dict[str, list[int]] = {}
    ref_classes: dict[str, list[int]] = {}
    for i, t in enumerate(candidate):
        cand_classes.setdefault(stem(t), []).append(i)
    for j, t in enumerate(reference):
        ref_classes.setdefault(stem(t), []).append(j)
    shared = sorted(set(cand_classes) & set(ref_classes))
    if not shared:
        return ()
    size = 1
    for s in shared:
        a, b = len(cand_classes[s]), len(ref_classes[s])
        size *= math.perm(max(a, b), min(a, b))
    if size > max_search:
        return tuple(sorted(p for s in shared
                            for p in _greedy_class(cand_classes[s], ref_classes[s], candidate, reference)))
    per_class = [_class_options(cand_classes[s], ref_classes[s], candidate, reference) for s in shared]
    best = None
    for combo in itertools.product(*per_class):
        pairs = tuple(sorted(p for part in combo for p in part))
        key = (count_chunks(pairs), pairs)
        if best is None or key < best:
            best = key
    return best[1]


def meteor_pair(candidate, reference, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    pairs = align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    prec, rec = m / len(candidate), m / len(reference)
    fmean = prec * rec / (alpha * prec + (1 - alpha) * rec)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return fmean * (1 - penalty)


def meteor_lite(pairs, scale: float = 100.0) -> float:
    """Mean over pairs of the best per-reference METEOR-lite score."""
    pairs = _pairs(pairs)
    if not pairs:
        return 0.0
    total = sum(max(meteor_pair(p.candidate, r) for r in p.references) for p in pairs)
    return scale * total / len(pairs)


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu4: float
    meteor_lite: float
    rouge_l: float
    cider: float

    FIELDS = ("bleu1", "bleu4", "meteor_lite", "rouge_l", "cider")

    def __post_init__(self):
        for name in self.FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def rounded(self, digits: int = 1) -> "MetricReport":
        return MetricReport(**{k: round(v, digits) for k, v in asdict(self).items()})

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls(**{k: float(data[k]) for k in cls.FIELDS})


def score_pairs(pairs, corpus_refs=None) -> MetricReport:
    pairs = _pairs(pairs)
    return MetricReport(
        bleu1=bleu(pairs, 1),
        bleu4=bleu(pairs, 4),
        meteor_lite=meteor_lite(pairs),
        rouge_l=rouge_l(pairs),
        cider=cider(pairs, corpus_refs),
    )


def score_captions(candidates: Mapping[int, Sequence[str]],
                   references: Mapping[int, Sequence[Sequence[str]]]) -> MetricReport:
    """Score tokenized candidates against tokenized references, both keyed by image id."""
    missing = set(candidates) - set(references)
    if missing:
        raise KeyError(f"no references for image ids {sorted(missing)[:5]}")
    ids = sorted(candidates)
    return score_pairs([EvalPair(candidates[i], references[i]) for i in ids])


def caption_split(state, ids: Sequence[int], vocab, store, max_len: int = 20) -> dict[int, list[str]]:
    """Greedy captions (special tokens stripped) for the given image ids."""
    from .model import caption_images

    ids = list(ids)
    if not ids:
        return {}
    seqs = caption_images(state, store.images(ids), max_len)
    return {i: vocab.decode(s, strip_specials=True) for i, s in zip(ids, seqs)}


def reference_tokens(store, ids: Sequence[int]) -> dict[int, list[list[str]]]:
    from .vocab import tokenize

    return {i: [tokenize(c) for c in store.captions(i)] for i in ids}


def evaluate(state, task, vocab, store, split: str = "test", max_len: int = 20) -> MetricReport:
    """Caption every image of ``task``'s split and score it against its references."""
    ids = task.split(split)
    if not ids:
        raise ValueError(f"task {task.task_id} has an empty {split} split")
    candidates = caption_split(state, ids, vocab, store, max_len)
    return score_captions(candidates, reference_tokens(store, ids))
