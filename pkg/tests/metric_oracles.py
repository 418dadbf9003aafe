"""Slow, literal re-computations of the caption metrics used as test oracles.

Each function follows the textbook definition as directly as possible and
shares no code with ``inccap.metrics``.  Scores are returned unscaled (0..1,
CIDEr 0..10).
"""
import itertools
import math

import numpy as np

SUFFIXES = ["ing", "es", "ed", "s"]


def grams(tokens, n):
    return [" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu(corpus, n):
    num, den = [0] * n, [0] * n
    c_total = r_total = 0
    for cand, refs in corpus:
        c_total += len(cand)
        lens = sorted(len(r) for r in refs)
        r_total += min(lens, key=lambda L: (abs(L - len(cand)), L))
        for k in range(1, n + 1):
            cg = grams(cand, k)
            for g in set(cg):
                allowed = max(grams(r, k).count(g) for r in refs)
                num[k - 1] += min(cg.count(g), allowed)
            den[k - 1] += len(cg)
    if c_total == 0 or 0 in num:
        return 0.0
    geo = 1.0
    for a, b in zip(num, den):
        geo *= (a / b) ** (1.0 / n)
    bp = 1.0 if c_total > r_total else math.exp(1 - r_total / c_total)
    return bp * geo


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs(a, b):
    for size in range(min(len(a), len(b)), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if _is_subsequence([a[i] for i in idx], b):
                return size
    return 0


def rouge_l(corpus, beta=1.2):
    scores = []
    for cand, refs in corpus:
        best = 0.0
        for r in refs:
            L = lcs(cand, r)
            if L:
                p, rc = L / len(cand), L / len(r)
                best = max(best, (1 + beta**2) * p * rc / (rc + beta**2 * p))
        scores.append(best)
    return float(np.mean(scores)) if scores else 0.0


def cider(corpus, max_n=4):
    n_docs = len(corpus)
    total = 0.0
    for cand, refs in corpus:
        per_n = []
        for k in range(1, max_n + 1):
            space = sorted({g for _, rs in corpus for r in rs for g in grams(r, k)} | set(grams(cand, k)))
            pos = {g: i for i, g in enumerate(space)}
            idf = np.array([math.log(n_docs / max(1, sum(any(g in grams(r, k) for r in rs) for _, rs in corpus)))
                            for g in space])

            def vec(tokens):
                v = np.zeros(len(space))
                gs = grams(tokens, k)
                for g in gs:
                    v[pos[g]] += 1.0 / len(gs)
                return v * idf

            vc = vec(cand)
            sims = []
            for r in refs:
                vr = vec(r)
                denom = np.linalg.norm(vc) * np.linalg.norm(vr)
                sims.append(float(vc @ vr / denom) if denom > 0 else 0.0)
            per_n.append(np.mean(sims))
        total += 10.0 * np.mean(per_n)
    return total / n_docs


def stem(tok):
    for s in SUFFIXES:
        if tok.endswith(s) and len(tok) - len(s) >= 3:
            return tok[: -len(s)]
    return tok


def chunks(pairs):
    pairs = sorted(pairs)
    return sum(1 for k, (i, j) in enumerate(pairs)
               if k == 0 or (i, j) != (pairs[k - 1][0] + 1, pairs[k - 1][1] + 1))


def meteor_pair(cand, ref):
    """Enumerate every one-to-one partial matching; keep the best (matches, exact, -chunks)."""
    best = None
    choices = [[None] + [j for j in range(len(ref)) if stem(ref[j]) == stem(c)] for c in cand]
    for combo in itertools.product(*choices):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)):
            continue
        pairs = [(i, j) for i, j in enumerate(combo) if j is not None]
        key = (len(pairs), sum(cand[i] == ref[j] for i, j in pairs), -chunks(pairs) if pairs else 0)
        if best is None or key > best[0]:
            best = (key, pairs)
    m = best[0][0]
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f = p * r / (0.9 * p + 0.1 * r)
    return f * (1 - 0.5 * (chunks(best[1]) / m) ** 3)


def meteor(corpus):
    return float(np.mean([max(meteor_pair(c, r) for r in refs) for c, refs in corpus])) if corpus else 0.0


def _t(text):
    return text.split()


# (candidate, references) corpora covering clipping, brevity, stems, repeats and misses
CORPORA = {
    "clipping": [(_t("the the the"), [_t("the cat")])],
    "lcs": [(_t("the cat sat"), [_t("the cat on the mat")])],
    "identical": [(_t("a red square on the left"), [_t("a red square on the left")])],
    "two_refs": [(_t("a dog runs on grass"), [_t("a dog running on the grass"), _t("dog runs")])],
    "short_candidate": [(_t("a cat"), [_t("a cat is sitting on a mat"), _t("the cat sits")])],
    "stems": [(_t("dogs jumped over boxes"), [_t("the dog jumps over the box"), _t("dogs jumping")])],
    "disjoint": [(_t("blue circle"), [_t("red square")]), (_t("a big star"), [_t("a big star")])],
    "reordered": [(_t("left the on square red a"), [_t("a red square on the left")])],
    "shapes": [
        (_t("a small red square on the left"), [_t("a small red square on the left"), _t("a red square sitting on the left")]),
        (_t("a blue circle in the middle"), [_t("a large blue circle in the middle"), _t("a round blue circle in the middle")]),
        (_t("a green triangle near the top"), [_t("a small green triangle near the top"), _t("a green triangle pointing up near the top")]),
    ],
    "repeats": [
        (_t("the cat the cat the cat"), [_t("the cat sat on the mat"), _t("there is a cat on the mat")]),
        (_t("on the mat"), [_t("the cat sat on the mat")]),
    ],
    "mixed_lengths": [
        (_t("a man riding a wave on top of a surfboard"), [_t("a man riding a wave on a surfboard"), _t("surfer riding a big wave")]),
        (_t("a plate of food"), [_t("a plate with food and a fork"), _t("food on a white plate")]),
        (_t("two giraffes standing in a field"), [_t("two giraffes standing next to each other in a field")]),
    ],
    "four_gram_hits": [
        (_t("a black dog laying on a grass covered field"), [_t("a black dog laying on a grass covered field"), _t("a dog on the grass")]),
        (_t("a black dog on a field"), [_t("a dog laying on a field"), _t("a black dog in the park")]),
    ],
}
