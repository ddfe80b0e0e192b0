# coding: utf-8

# # From a post to character features
#
# Posts are lowercased and turned into fixed-length id arrays; hashtags are
# joined with single spaces after stripping `#`.  The character branch then
# runs conv, overlapping max-pool, multi-head self-attention and an FFN for
# each kernel size.

# In[1]:

import numpy as np

from mrlf import functional as F
from mrlf.data import PostRecord
from mrlf.text import (build_vocab, char_branch, char_pooled_length, encode, init_char_params,
                       init_embedding, multi_head_self_attention)

posts = [
    PostRecord("a", "Sunset over the Hudson!", ["#NYC", "#sunset"], [], 0, 40.7, -74.0),
    PostRecord("b", "Coffee near the park", ["#nyc", "#coffee"], [], 1, 40.8, -73.9),
]
vocab = build_vocab(posts, hashtag_min_count=1)
print("chars, words, hashtags:", vocab.sizes)
print("hashtags:", vocab.hashtags)


# In[2]:

text, tags = encode(posts[0], vocab)
print(text.char_ids[:25])
print("".join(vocab.chars[i] for i in tags.char_ids if i))


# Pooled lengths at the full 100-character width: the stride is
# `max(s - 2, 1)` for window `s`.

# In[3]:

for s in (3, 4, 5, 6):
    print(s, char_pooled_length(100, s))


# Run the full character branch for a batch of two posts, with small widths.

# In[4]:

rng = np.random.default_rng(0)
embed = init_embedding(rng, vocab.sizes[0], 8)
params = init_char_params(rng, embed_dim=8, filters=8, attn_dim=8, ffn_hidden=16, out_dim=4,
                          kernel_sizes=(3, 4, 5, 6))
ids = np.stack([encode(p, vocab)[0].char_ids for p in posts])
chars = F.embedding_lookup(ids, embed, padding_idx=0)
feature, pooled = char_branch(chars, params, (3, 4, 5, 6), heads=2)
print(feature.shape, [p.shape for p in pooled])


# Every attention row is a probability distribution.

# In[5]:

_, attn = multi_head_self_attention(pooled[0], params["s3.wq"], params["s3.wk"],
                                    params["s3.wv"], heads=2, return_weights=True)
print(attn.shape, np.abs(attn.data.sum(axis=-1) - 1).max())
