"""Synthetic multi-modal check-in posts with controllable per-modality signal.

Every location owns indicator words (for text), indicator hashtags and a
unit direction in image-feature space.  A post emits its location's
indicator in each modality with that modality's signal probability and
otherwise only filler.  ``noise`` is the chance that an attached image is a
geographic-free "portrait" shot (high portrait ratio, random feature).
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .data import EARTH_RADIUS_KM, Location, LocationTable, PostRecord
from .image import ImageRecord

KM_PER_DEG = EARTH_RADIUS_KM * np.pi / 180.0


@dataclass
class SynthConfig:
    n_locations: int = 10
    n_posts: int = 2000
    n_filler_words: int = 300
    n_filler_tags: int = 40
    signal: float = 0.9
    signal_text: float | None = None
    signal_tags: float | None = None
    signal_image: float | None = None
    noise: float = 0.2
    typo_rate: float = 0.0
    feature_dim: int = 64
    words_per_post: tuple = (4, 12)
    tags_per_post: tuple = (1, 4)
    images_per_post: tuple = (1, 3)
    feature_jitter: float = 0.3
    noise_image_scale: float = 2.0
    city_lat: float = 40.7128
    city_lon: float = -74.0060
    city_radius_km: float = 4.0
    post_radius_km: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("signal", "signal_text", "signal_tags", "signal_image", "noise", "typo_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.feature_dim < self.n_locations:
            raise ValueError("feature_dim must be at least n_locations")

    def strength(self, modality: str) -> float:
        v = getattr(self, f"signal_{modality}")
        return self.signal if v is None else v


def _pseudo_words(rng, n: int, taken: set, lo: int = 4, hi: int = 9) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    out = []
    while len(out) < n:
        w = "".join(rng.choice(letters, size=rng.integers(lo, hi)))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _offset(lat: float, lon: float, dx_km: float, dy_km: float) -> tuple[float, float]:
    return (lat + dy_km / KM_PER_DEG,
            lon + dx_km / (KM_PER_DEG * np.cos(np.radians(lat))))


def _disk(rng, radius: float) -> tuple[float, float]:
    r = radius * np.sqrt(rng.random())
    theta = 2 * np.pi * rng.random()
    return r * np.cos(theta), r * np.sin(theta)


def _typo(rng, word: str, rate: float) -> str:
    if rate == 0.0 or rng.random() >= rate:
        return word
    i = rng.integers(len(word))
    return word[:i] + rng.choice(list(string.ascii_lowercase)) + word[i + 1:]


def synth_generate(cfg: SynthConfig) -> tuple[list[PostRecord], LocationTable]:
    """Generate posts and their location table (image features in memory).

    Use :func:`mrlf.data.write_dataset` to put them on disk.
    """
    rng = np.random.default_rng(cfg.seed)
    m = cfg.n_locations
    taken: set = set()
    fillers = _pseudo_words(rng, cfg.n_filler_words, taken)
    filler_tags = _pseudo_words(rng, cfg.n_filler_tags, taken)
    text_ind = [_pseudo_words(rng, 2, taken) for _ in range(m)]
    # the first indicator hashtag repeats a text indicator word
    tag_ind = [[words[0], _pseudo_words(rng, 1, taken)[0]] for words in text_ind]

    directions = np.linalg.qr(rng.normal(size=(cfg.feature_dim, m)))[0].T  # [m, D] orthonormal

    locations = []
    for i in range(m):
        lat, lon = _offset(cfg.city_lat, cfg.city_lon, *_disk(rng, cfg.city_radius_km))
        locations.append(Location(i, f"poi_{i:03d}", float(lat), float(lon), 0))

    labels = rng.permutation(np.arange(cfg.n_posts) % m) if cfg.n_posts else np.zeros(0, int)
    s_text, s_tags, s_img = (cfg.strength(k) for k in ("text", "tags", "image"))
    d = cfg.feature_dim
    posts = []
    for n, loc in enumerate(labels.tolist()):
        words = list(rng.choice(fillers, size=rng.integers(*cfg.words_per_post, endpoint=True)))
        if rng.random() < s_text:
            word = _typo(rng, text_ind[loc][rng.integers(2)], cfg.typo_rate)
            words.insert(int(rng.integers(len(words) + 1)), word)
        text = " ".join(words) + ("!" if rng.random() < 0.3 else "")

        tags = list(rng.choice(filler_tags, size=rng.integers(*cfg.tags_per_post, endpoint=True)))
        if rng.random() < s_tags:
            tags.insert(int(rng.integers(len(tags) + 1)), tag_ind[loc][rng.integers(2)])
        tags = ["#" + t for t in tags]

        images = []
        for k in range(int(rng.integers(*cfg.images_per_post, endpoint=True))):
            if rng.random() < cfg.noise:
                ratio = rng.uniform(0.55, 1.0)
                v = rng.normal(size=d)
                feat = cfg.noise_image_scale * v / np.linalg.norm(v)
            else:
                ratio = rng.uniform(0.0, 0.45)
                if rng.random() < s_img:
                    base = directions[loc]
                else:
                    v = rng.normal(size=d)
                    base = v / np.linalg.norm(v)
                feat = base + cfg.feature_jitter * rng.normal(size=d) / np.sqrt(d)
            images.append(ImageRecord(f"p{n:06d}_{k}", float(ratio),
                                      feature=feat.astype("<f4").astype(np.float64)))

        lat, lon = _offset(locations[loc].center_lat, locations[loc].center_lon,
                           *_disk(rng, cfg.post_radius_km * 0.999))
        posts.append(PostRecord(f"p{n:06d}", text, tags, images, loc, float(lat), float(lon)))
        locations[loc].post_count += 1
    return posts, LocationTable(locations)
