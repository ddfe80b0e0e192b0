"""Dataset schema, loading, the preprocessing filters, splits and distances.

On disk a dataset is a manifest JSON::

    {"name": ..., "posts_file": "posts.jsonl", "locations_file": "locations.json",
     "image_feature_dir": "features", "feature_dim": 512}

next to a posts JSONL (one :class:`PostRecord` per line), a locations JSON
array and one little-endian float32 blob per image.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .image import ImageRecord, filter_noisy
from .text import normalize_tag

EARTH_RADIUS_KM = 6371.0088


class DatasetError(ValueError):
    """Invalid dataset content or layout."""


@dataclass
class PostRecord:
    post_id: str
    text: str
    hashtags: list[str]
    images: list[ImageRecord]
    location_id: int
    post_lat: float
    post_lon: float


@dataclass
class Location:
    id: int
    name: str
    center_lat: float
    center_lon: float
    post_count: int = 0


@dataclass
class LocationTable:
    locations: list[Location] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.locations)

    def __iter__(self):
        return iter(self.locations)

    def __getitem__(self, i: int) -> Location:
        return self.locations[i]

    def centers(self) -> np.ndarray:
        return np.array([[l.center_lat, l.center_lon] for l in self.locations]).reshape(-1, 2)

    def to_list(self) -> list[dict]:
        return [vars(l).copy() for l in self.locations]

    @classmethod
    def from_list(cls, rows: list[dict]) -> "LocationTable":
        return cls([Location(int(r["id"]), str(r["name"]), float(r["center_lat"]),
                             float(r["center_lon"]), int(r.get("post_count", 0))) for r in rows])


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test,
                "ratios": list(self.ratios), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), tuple(d["ratios"]),
                   int(d["seed"]))


# -- geodesy --------------------------------------------------------------

def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; works on scalars or numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


# -- loading --------------------------------------------------------------

def _check_coords(lat, lon, where: str) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise DatasetError(f"{where}: coordinate ({lat}, {lon}) out of range")


def read_feature(path, dim: int | None = None, shape=None) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4").astype(np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise DatasetError(f"{path}: expected {int(np.prod(shape))} floats, found {arr.size}")
        return arr.reshape(shape)
    if dim is not None and arr.size != dim:
        raise DatasetError(f"{path}: expected {dim} floats, found {arr.size}")
    return arr


def _parse_post(obj: dict, lineno: int, root: Path, manifest: dict, n_locations: int) -> PostRecord:
    where = f"line {lineno}"
    required = ("post_id", "text", "hashtags", "images", "location_id", "post_lat", "post_lon")
    missing = [k for k in required if k not in obj]
    if missing:
        raise DatasetError(f"{where}: missing field(s) {', '.join(missing)}")
    if not isinstance(obj["hashtags"], list) or not isinstance(obj["images"], list):
        raise DatasetError(f"{where}: hashtags and images must be lists")
    loc = obj["location_id"]
    if not isinstance(loc, int) or not 0 <= loc < n_locations:
        raise DatasetError(f"{where}: unknown location_id {loc!r}")
    lat, lon = float(obj["post_lat"]), float(obj["post_lon"])
    _check_coords(lat, lon, where)

    grid = manifest.get("image_mode", "feature") == "grid"
    images = []
    for im in obj["images"]:
        try:
            path = root / im["path"]
            ratio = float(im["portrait_ratio"])
            image_id = str(im["image_id"])
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{where}: bad image entry {im!r}") from exc
        if not path.is_file():
            raise DatasetError(f"{where}: image file not found: {path}")
        if not 0.0 <= ratio <= 1.0:
            raise DatasetError(f"{where}: portrait_ratio {ratio} outside [0, 1]")
        if grid:
            values = read_feature(path, shape=manifest["grid_shape"])
            images.append(ImageRecord(image_id, ratio, raw_grid=values, path=im["path"]))
        else:
            values = read_feature(path, dim=manifest.get("feature_dim"))
            images.append(ImageRecord(image_id, ratio, feature=values, path=im["path"]))
    return PostRecord(str(obj["post_id"]), str(obj["text"]), [str(h) for h in obj["hashtags"]],
                      images, loc, lat, lon)


def load_manifest(manifest_path) -> dict:
    path = Path(manifest_path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("name", "posts_file", "locations_file", "image_feature_dir", "feature_dim"):
        if key not in manifest:
            raise DatasetError(f"{path}: manifest lacks {key!r}")
    return manifest


def load_and_validate(manifest_path) -> tuple[list[PostRecord], LocationTable]:
    """Read and schema-check a dataset; errors name the offending line."""
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    loc_path = root / manifest["locations_file"]
    if not loc_path.is_file():
        raise DatasetError(f"locations file not found: {loc_path}")
    try:
        table = LocationTable.from_list(json.loads(loc_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{loc_path}: invalid locations table ({exc})") from exc
    if [l.id for l in table] != list(range(len(table))):
        raise DatasetError(f"{loc_path}: location ids must be 0..m-1 in order")
    for l in table:
        _check_coords(l.center_lat, l.center_lon, f"location {l.id}")

    posts_path = root / manifest["posts_file"]
    if not posts_path.is_file():
        raise DatasetError(f"posts file not found: {posts_path}")
    posts, seen = [], set()
    with posts_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            post = _parse_post(obj, lineno, root, manifest, len(table))
            if post.post_id in seen:
                raise DatasetError(f"line {lineno}: duplicate post_id {post.post_id!r}")
            seen.add(post.post_id)
            posts.append(post)
    return posts, table


def post_to_dict(post: PostRecord) -> dict:
    return {"post_id": post.post_id, "text": post.text, "hashtags": list(post.hashtags),
            "images": [{"image_id": im.image_id, "path": im.path,
                        "portrait_ratio": im.portrait_ratio} for im in post.images],
            "location_id": post.location_id, "post_lat": post.post_lat, "post_lon": post.post_lon}


def write_dataset(out_dir, posts: Sequence[PostRecord], table: LocationTable, name: str = "dataset",
                  feature_dir: str = "features", write_features: bool = True,
                  image_root=None) -> Path:
    """Write manifest, posts JSONL, locations JSON and (optionally) feature blobs.

    With ``write_features=False`` the image paths are re-pointed at the
    existing blobs under ``image_root`` instead of copying them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feat_root = out / feature_dir
    rows = []
    for post in posts:
        row = post_to_dict(post)
        for im, entry in zip(post.images, row["images"]):
            if write_features:
                feat_root.mkdir(exist_ok=True)
                rel = f"{feature_dir}/{im.image_id}.f32"
                np.asarray(im.values, dtype="<f4").tofile(out / rel)
                entry["path"] = rel
            else:
                entry["path"] = os.path.relpath(Path(image_root) / im.path, out)
        rows.append(row)
    with (out / "posts.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    (out / "locations.json").write_text(json.dumps(table.to_list(), indent=1), encoding="utf-8")
    first = next((im for p in posts for im in p.images), None)
    manifest = {"name": name, "posts_file": "posts.jsonl", "locations_file": "locations.json",
                "image_feature_dir": feature_dir,
                "feature_dim": int(first.values.size) if first is not None else 0}
    if first is not None and first.raw_grid is not None:
        manifest["image_mode"] = "grid"
        manifest["grid_shape"] = list(first.raw_grid.shape)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


# -- preprocessing filters ------------------------------------------------

def _filter_once(posts, table, hashtag_min_count, location_min_posts, eta):
    counts = Counter(normalize_tag(h) for p in posts for h in p.hashtags)
    kept = []
    for p in posts:
        tags = [h for h in p.hashtags if counts[normalize_tag(h)] >= hashtag_min_count]
        kept.append(replace(p, hashtags=tags, images=filter_noisy(p.images, eta)))

    per_loc = Counter(p.location_id for p in kept)
    survivors = [l for l in table if per_loc[l.id] >= location_min_posts]
    remap = {l.id: i for i, l in enumerate(survivors)}
    new_table = LocationTable([replace(l, id=remap[l.id], post_count=per_loc[l.id])
                               for l in survivors])
    new_posts = [replace(p, location_id=remap[p.location_id]) for p in kept
                 if p.location_id in remap]
    return new_posts, new_table


def filter_dataset(posts: Sequence[PostRecord], table: LocationTable, hashtag_min_count: int = 50,
                   location_min_posts: int = 100, eta: float = 0.5):
    """Apply the hashtag, noisy-image and sparse-location rules, in that order.

    Dropping a location can push hashtags below threshold, so the rules are
    reapplied until nothing changes; the result is a fixed point, which
    makes the filter idempotent.  Location ids are re-densified.
    """
    cur_posts, cur_table = list(posts), table
    while True:
        new_posts, new_table = _filter_once(cur_posts, cur_table, hashtag_min_count,
                                            location_min_posts, eta)
        if not new_posts:
            raise DatasetError("every post was filtered away")
        if new_posts == cur_posts and new_table == cur_table:
            return new_posts, new_table
        cur_posts, cur_table = new_posts, new_table


def stratified_split(posts: Sequence[PostRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Per-location proportional split; rounding remainders go to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_loc: dict[int, list[str]] = defaultdict(list)
    for p in posts:
        by_loc[p.location_id].append(p.post_id)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for loc in sorted(by_loc):
        ids = by_loc[loc]
        if len(ids) < 3:
            raise DatasetError(f"location {loc} has only {len(ids)} posts; need at least 3")
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_val = math.floor(len(ids) * ratios[1] + 1e-9)
        n_test = math.floor(len(ids) * ratios[2] + 1e-9)
        n_train = len(ids) - n_val - n_test
        train += order[:n_train]
        val += order[n_train:n_train + n_val]
        test += order[n_train + n_val:]
    return DatasetSplit(train, val, test, tuple(ratios), seed)
