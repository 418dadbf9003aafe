"""
Growing the vocabulary without disturbing old words
===================================================

When a new class arrives its captions bring new words.  The vocabulary only
ever appends, and the decoder gains matching embedding rows and output
columns.  The scores the model assigns to old words must not move at all.
"""
# %%
import numpy as np

from inccap.dataio import generate_synthetic
from inccap.model import ModelConfig, decode_logits, expand_decoder, init_state
from inccap.vocab import END_ID, START_ID, Vocabulary, accumulate, build_task_vocab

ann, store = generate_synthetic(["square", "circle", "star"], 30, seed=0)
by_shape = {}
for image_id, cat in ann.category_labels:
    by_shape.setdefault(ann.categories[cat], []).extend(store.captions(image_id))

old_words = build_task_vocab(by_shape["square"] + by_shape["circle"], min_count=1)
new_words = build_task_vocab(by_shape["star"], min_count=1)
v_old = accumulate(Vocabulary(), old_words)
v_new = accumulate(v_old, new_words)

print(f"old vocabulary: {len(v_old)} entries (version {v_old.version})")
print(f"star captions use {len(new_words)} words, {len(new_words & old_words)} of them already known")
print(f"accumulated: {len(v_new)} = {len(v_old)} + {len(new_words)} - {len(new_words & old_words)}")
print("appended:", v_new.tokens[len(v_old):])

# %% [markdown]
# Every old token keeps its index, so old checkpoints and cached pseudo
# labels stay valid.  Now expand a model and compare pre-softmax scores.

# %%
state = init_state(ModelConfig(), v_old, seed=0)
grown = expand_decoder(state, v_new, seed=1)
feature = np.random.default_rng(0).normal(size=64).astype(np.float32)
prefix = [START_ID] + v_old.encode("a red square".split()) + [END_ID]
before = decode_logits(state, feature, prefix)
after = decode_logits(grown, feature, prefix)
print("shapes:", before.shape, "->", after.shape)
print("old-token scores bit-identical:", np.array_equal(before, after[:, : len(v_old)]))
