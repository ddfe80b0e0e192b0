# coding: utf-8

# # Training on synthetic posts
#
# The synthetic generator plants location-indicative words, hashtags and
# image directions, so a working model must learn them.  Desk widths keep
# this to about a minute on one core.

# In[1]:

import math

from mrlf import SynthConfig, TrainConfig, synth_generate
from mrlf.train import ablate, encode_posts, evaluate_params, fit, format_table, prepare_data

posts, table = synth_generate(SynthConfig(n_locations=10, n_posts=1000, signal=0.9,
                                          noise=0.2, seed=7))
print(posts[0].text, posts[0].hashtags, len(posts[0].images))


# Filtering, the stratified split and the vocabulary all happen in
# `prepare_data`.

# In[2]:

cfg = TrainConfig.desk(epochs=6, seed=7, hashtag_min_count=20, location_min_posts=50)
data = prepare_data(posts, table, cfg)
print(len(data.train), len(data.val), len(data.test), data.vocab.sizes)


# The head starts at zero, so the first loss is exactly ln(10).

# In[3]:

result = fit(cfg, data, on_epoch=lambda r: print(
    f"epoch {r['epoch']}: train {r['train_loss']:.3f} val acc {r['val_acc']:.3f}"))
print(f"initial loss {result.initial_loss:.6f}, ln 10 = {math.log(10):.6f}")


# In[4]:

test = encode_posts(data.test, data.vocab, result.model_config)
m = evaluate_params(result.params, result.model_config, test, data.locations)
print(f"test accuracy {m.accuracy:.3f}, mean error {m.mean_km:.3f} km")


# ## A small ablation
#
# Drop one modality at a time.  Dropped components enter the post
# representation as zeros, so every variant has the same head shape.

# In[5]:

rows = ablate(cfg.replace(epochs=3), ["full", "drop-image", "drop-text"], posts, table)
print(format_table(rows))
