import json
import math
from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency

from mrlf.data import (DatasetError, Location, LocationTable, PostRecord, filter_dataset,
                       haversine_km, load_and_validate, stratified_split, write_dataset)
from mrlf.image import ImageRecord
from mrlf.synth import SynthConfig, synth_generate
from mrlf.text import normalize_tag, tokenize_words

from oracles import cosine_law_km, vincenty_sphere_km

NYC = (40.7128, -74.0060)
LONDON = (51.5074, -0.1278)


def make_post(i, loc, tags=(), ratios=()):
    images = [ImageRecord(f"i{i}_{k}", r, feature=np.zeros(2)) for k, r in enumerate(ratios)]
    return PostRecord(f"p{i}", "t", list(tags), images, loc, 0.0, 0.0)


def table(n):
    return LocationTable([Location(i, f"l{i}", 0.0, 0.0) for i in range(n)])


# -- loading ---------------------------------------------------------------

def write_raw(tmp_path, lines, n_loc=2):
    (tmp_path / "posts.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    (tmp_path / "locations.json").write_text(json.dumps(table(n_loc).to_list()))
    manifest = {"name": "t", "posts_file": "posts.jsonl", "locations_file": "locations.json",
                "image_feature_dir": "features", "feature_dim": 2}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path / "manifest.json"


def row(i, loc=0, **kw):
    obj = {"post_id": f"p{i}", "text": "hi", "hashtags": ["#a", "b"], "images": [],
           "location_id": loc, "post_lat": 1.0, "post_lon": 2.0}
    obj.update(kw)
    return json.dumps(obj)


def test_empty_jsonl_is_valid(tmp_path):
    posts, tbl = load_and_validate(write_raw(tmp_path, []))
    assert posts == [] and len(tbl) == 2


def test_three_valid_lines(tmp_path):
    posts, _ = load_and_validate(write_raw(tmp_path, [row(0), row(1, 1), row(2)]))
    assert [p.post_id for p in posts] == ["p0", "p1", "p2"]
    assert posts[1].hashtags == ["#a", "b"] and posts[1].location_id == 1


def test_missing_field_names_the_line(tmp_path):
    bad = json.loads(row(1))
    del bad["location_id"]
    with pytest.raises(DatasetError, match="line 2.*location_id"):
        load_and_validate(write_raw(tmp_path, [row(0), json.dumps(bad)]))


@pytest.mark.parametrize("line,pattern", [
    ("{not json", "line 2: malformed"),
    (row(0), "line 2: duplicate"),
    (row(1, 5), "line 2: unknown location_id"),
    (row(1, post_lat=91.0), "line 2"),
    (row(1, images=[{"image_id": "x", "path": "features/x.f32", "portrait_ratio": 0.1}]),
     "line 2: image file not found"),
])
def test_load_errors(tmp_path, line, pattern):
    with pytest.raises(DatasetError, match=pattern):
        load_and_validate(write_raw(tmp_path, [row(0), line]))


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_and_validate(tmp_path / "nope.json")


def test_write_then_load_round_trip(tmp_path, small_synth):
    posts, tbl = small_synth
    loaded, tbl2 = load_and_validate(write_dataset(tmp_path, posts, tbl, name="x"))
    assert tbl2 == tbl
    assert [p.post_id for p in loaded] == [p.post_id for p in posts]
    npt.assert_array_equal(loaded[5].images[0].feature, posts[5].images[0].feature)
    assert loaded[5].hashtags == posts[5].hashtags


# -- filtering -------------------------------------------------------------

def test_sparse_location_removed_and_ids_redensified():
    posts = ([make_post(i, 0) for i in range(100)] + [make_post(100 + i, 1) for i in range(99)]
             + [make_post(300 + i, 2) for i in range(120)])
    kept, tbl = filter_dataset(posts, table(3), hashtag_min_count=0, location_min_posts=100)
    assert [l.id for l in tbl] == [0, 1]
    assert [l.name for l in tbl] == ["l0", "l2"]
    assert Counter(p.location_id for p in kept) == {0: 100, 1: 120}
    assert [l.post_count for l in tbl] == [100, 120]


def test_identity_filter():
    posts = [make_post(i, i % 2, tags=["#x"], ratios=[0.9, 0.2]) for i in range(6)]
    kept, tbl = filter_dataset(posts, table(2), 0, 0, 1.0)
    assert kept == posts and [l.post_count for l in tbl] == [3, 3]


def test_filter_drops_rare_tags_and_portraits():
    posts = [make_post(0, 0, ["#a", "#B"], [0.6, 0.3]), make_post(1, 0, ["b"], [0.5])]
    kept, _ = filter_dataset(posts, table(1), hashtag_min_count=2, location_min_posts=1, eta=0.5)
    assert kept[0].hashtags == ["#B"] and kept[1].hashtags == ["b"]
    assert [im.portrait_ratio for im in kept[0].images] == [0.3]
    assert [im.portrait_ratio for im in kept[1].images] == [0.5]


def test_everything_filtered_is_an_error():
    with pytest.raises(DatasetError):
        filter_dataset([make_post(0, 0)], table(1), location_min_posts=5)


corpus = st.lists(st.tuples(st.integers(0, 3), st.lists(st.sampled_from("abcde"), max_size=3),
                            st.lists(st.floats(0, 1), max_size=2)), min_size=1, max_size=60)


@given(corpus, st.integers(0, 4), st.integers(0, 12), st.floats(0, 1))
@settings(max_examples=150, deadline=None)
def test_filter_idempotent_with_invariants(rows, min_tag, min_posts, eta):
    posts = [make_post(i, loc, tags, ratios) for i, (loc, tags, ratios) in enumerate(rows)]
    try:
        once = filter_dataset(posts, table(4), min_tag, min_posts, eta)
    except DatasetError:
        return
    twice = filter_dataset(*once, min_tag, min_posts, eta)
    assert twice == once
    kept, tbl = once
    assert [l.id for l in tbl] == list(range(len(tbl)))
    assert min(l.post_count for l in tbl) >= min_posts
    counts = Counter(normalize_tag(h) for p in kept for h in p.hashtags)
    assert all(c >= min_tag for c in counts.values())
    assert all(im.portrait_ratio <= eta for p in kept for im in p.images)


# -- splits ----------------------------------------------------------------

def test_split_8_1_1_and_determinism():
    posts = [make_post(i, 0) for i in range(10)]
    s = stratified_split(posts, seed=3)
    assert (len(s.train), len(s.val), len(s.test)) == (8, 1, 1)
    assert stratified_split(posts, seed=3) == s
    assert stratified_split(posts, seed=4) != s
    s = stratified_split(posts, (1.0, 0.0, 0.0))
    assert len(s.train) == 10 and not s.val and not s.test


def test_split_rejects_tiny_location():
    with pytest.raises(DatasetError):
        stratified_split([make_post(0, 0), make_post(1, 0)])


@given(st.lists(st.integers(3, 40), min_size=1, max_size=6), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_split_partitions_and_stratifies(sizes, seed):
    posts = [make_post(f"{loc}_{i}", loc) for loc, n in enumerate(sizes) for i in range(n)]
    s = stratified_split(posts, seed=seed)
    ids = s.train + s.val + s.test
    assert sorted(ids) == sorted(p.post_id for p in posts)
    assert len(set(ids)) == len(ids)
    loc_of = {p.post_id: p.location_id for p in posts}
    for loc, n in enumerate(sizes):
        assert sum(loc_of[i] == loc for i in s.val) == math.floor(n * 0.1 + 1e-9)


# -- synthetic generator ---------------------------------------------------

def test_synth_empty_and_deterministic(tmp_path):
    posts, tbl = synth_generate(SynthConfig(n_posts=0))
    assert posts == [] and len(tbl) == 10
    cfg = SynthConfig(n_locations=3, n_posts=30, feature_dim=8, seed=5)
    a = write_dataset(tmp_path / "a", *synth_generate(cfg)).parent
    b = write_dataset(tmp_path / "b", *synth_generate(cfg)).parent
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_synth_post_geometry():
    posts, tbl = synth_generate(SynthConfig(n_locations=5, n_posts=200, feature_dim=8, seed=1))
    c = tbl.centers()
    d = [haversine_km(p.post_lat, p.post_lon, *c[p.location_id]) for p in posts]
    assert max(d) <= 0.5
    assert [l.post_count for l in tbl] == [40] * 5


def test_synth_full_signal_is_separable():
    cfg = SynthConfig(n_locations=4, n_posts=80, signal=1.0, noise=0.0, feature_dim=8, seed=2)
    posts, _ = synth_generate(cfg)
    words = {}
    for p in posts:
        for w in tokenize_words(p.text):
            words.setdefault(w, set()).add(p.location_id)
    exclusive = {w for w, locs in words.items() if len(locs) == 1}
    assert all(any(w in exclusive for w in tokenize_words(p.text)) for p in posts)
    # every clean image has its location's direction as the largest projection
    feats = np.array([p.images[0].feature for p in posts])
    labels = np.array([p.location_id for p in posts])
    centroids = np.array([feats[labels == k].mean(axis=0) for k in range(4)])
    assert (np.argmax(feats @ centroids.T, axis=1) == labels).all()


def test_synth_zero_signal_is_uninformative():
    cfg = SynthConfig(n_locations=10, n_posts=10_000, signal=0.0, noise=0.0, feature_dim=10,
                      images_per_post=(0, 0), seed=11)
    posts, _ = synth_generate(cfg)
    vocab = sorted({w for p in posts for w in p.text.rstrip("!").split()})
    index = {w: i for i, w in enumerate(vocab)}
    table_ = np.zeros((10, len(vocab)))
    for p in posts:
        for w in p.text.rstrip("!").split():
            table_[p.location_id, index[w]] += 1
    assert chi2_contingency(table_)[1] > 0.01


# -- haversine -------------------------------------------------------------

def test_haversine_examples():
    assert haversine_km(10.0, 20.0, 10.0, 20.0) == 0.0
    assert haversine_km(0, 0, 0, 180) == pytest.approx(math.pi * 6371.0088, abs=1e-6)
    assert haversine_km(0, 0, 0, 180) == pytest.approx(20015.1, abs=0.05)
    d = haversine_km(*NYC, *LONDON)
    assert abs(d - 5570) <= 5
    assert d == pytest.approx(cosine_law_km(*NYC, *LONDON), abs=1e-6)


def test_haversine_vectorized(rng):
    lat = rng.uniform(-90, 90, size=(50, 2))
    lon = rng.uniform(-180, 180, size=(50, 2))
    d = haversine_km(lat[:, 0], lon[:, 0], lat[:, 1], lon[:, 1])
    ref = [vincenty_sphere_km(a, b, c, e) for a, b, c, e in zip(lat[:, 0], lon[:, 0],
                                                                  lat[:, 1], lon[:, 1])]
    npt.assert_allclose(d, ref, atol=1e-6)


def test_haversine_metric_properties():
    r = np.random.default_rng(0)
    lat = r.uniform(-90, 90, size=(1000, 3))
    lon = r.uniform(-180, 180, size=(1000, 3))
    ab = haversine_km(lat[:, 0], lon[:, 0], lat[:, 1], lon[:, 1])
    ba = haversine_km(lat[:, 1], lon[:, 1], lat[:, 0], lon[:, 0])
    bc = haversine_km(lat[:, 1], lon[:, 1], lat[:, 2], lon[:, 2])
    ac = haversine_km(lat[:, 0], lon[:, 0], lat[:, 2], lon[:, 2])
    npt.assert_array_equal(ab, ba)
    assert (ab > 0).all()
    assert (ac <= ab + bc + 1e-9).all()


@given(st.floats(-90, 90), st.floats(-180, 180), st.floats(-90, 90), st.floats(-180, 180))
@settings(max_examples=200, deadline=None)
def test_haversine_symmetric_nonnegative(a, b, c, d):
    x = haversine_km(a, b, c, d)
    assert x >= 0 and x == haversine_km(c, d, a, b)
    assert x <= math.pi * 6371.0088 + 1e-6
