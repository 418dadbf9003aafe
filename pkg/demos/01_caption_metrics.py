"""
Scoring captions by hand
========================

A short tour of the five caption metrics on a few toy candidates.  Everything
runs in well under a second.
"""
# %%
from inccap.metrics import bleu, cider, meteor_lite, rouge_l, score_pairs
from inccap.vocab import tokenize

refs = [tokenize("a small red square on the left"), tokenize("a red square sitting on the left")]

candidates = {
    "exact": "a small red square on the left",
    "reordered": "on the left a small red square",
    "stemmed": "red squares sitting left",
    "wrong": "a blue circle at the top",
}

# %% [markdown]
# Each metric reacts to a different kind of error.  BLEU-4 collapses as soon
# as no 4-gram survives, ROUGE-L only cares about the longest common
# subsequence, METEOR-lite forgives the plural through stemming and CIDEr
# weights words by how rare they are across the corpus.

# CIDEr needs a corpus to learn which words are common, so a few other
# images' references stand in for the rest of the test set.
others = [[tokenize("a blue circle at the top")], [tokenize("a green triangle on the right")],
          [tokenize("a small yellow star in the middle")]]

# %%
corpus = [(tokenize(c), refs) for c in candidates.values()]
print(f"{'candidate':<10} {'BLEU1':>6} {'BLEU4':>6} {'METEOR':>7} {'ROUGE_L':>8} {'CIDEr':>7}")
for name, pair in zip(candidates, corpus):
    r = score_pairs([pair], corpus_refs=[refs] + others)
    print(f"{name:<10} {r.bleu1:6.1f} {r.bleu4:6.1f} {r.meteor_lite:7.1f} {r.rouge_l:8.1f} {r.cider:7.1f}")

# %% [markdown]
# Corpus-level scores are not the mean of per-caption scores for BLEU: n-gram
# counts are pooled first and the brevity penalty is applied once.

# %%
print("corpus BLEU4        ", round(bleu(corpus, 4), 2))
print("mean ROUGE-L        ", round(rouge_l(corpus), 2))
print("mean METEOR-lite    ", round(meteor_lite(corpus), 2))
print("CIDEr (with others) ", round(cider(corpus, corpus_refs=[refs] + others), 2))
# with identical references everywhere every n-gram is "common" and CIDEr is 0
print("CIDEr (toy corpus)  ", round(cider(corpus), 2))
