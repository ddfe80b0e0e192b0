"""Training loop, evaluation metrics and the ablation runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (DatasetSplit, LocationTable, PostRecord, filter_dataset, haversine_km,
                   load_and_validate, stratified_split)
from .image import aggregate
from .model import MODALITIES, Batch, ModelConfig, forward, init_params
from .tensor import NonFiniteError, Tensor, backward, no_grad
from .text import Vocabulary, build_vocab, encode

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "val_mean_km", "lr")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    lr_factor: float = 0.8
    lr_patience: int = 10
    lr_floor: float = 1e-6
    weight_decay: float = 0.0
    dropout: float = 0.5
    heads: int = 8
    embed_dim: int = 100
    max_chars: int = 100
    max_words: int = 50
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    fusion: str = "early"
    fusion_reduce: str = "mean"
    modalities: tuple = MODALITIES
    char_kernel_sizes: tuple = (3, 4, 5, 6)
    char_filters: int = 100
    attn_dim: int = 96
    ffn_hidden: int = 200
    char_out: int = 100
    word_kernel_sizes: tuple = (1, 2, 3, 4)
    word_filters: int = 100
    image_out: int = 100
    fusion_hidden: int = 200
    fusion_out: int = 100
    share_char_embeddings: bool = False
    hashtag_min_count: int = 50
    location_min_posts: int = 100
    eta: float = 0.5
    split_ratios: tuple = (0.8, 0.1, 0.1)
    mean_mode: str = "center_to_post"

    def __post_init__(self):
        for name in ("modalities", "char_kernel_sizes", "word_kernel_sizes", "split_ratios"):
            setattr(self, name, tuple(getattr(self, name)))
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if self.lr_patience < 1:
            raise ConfigError("lr_patience must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.fusion not in ("early", "late", "none"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.mean_mode not in ("center_to_post", "center_to_center"):
            raise ConfigError(f"unknown mean_mode {self.mean_mode!r}")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def desk(cls, **changes) -> "TrainConfig":
        """Scaled-down widths that train on one CPU core in minutes."""
        base = dict(embed_dim=16, max_chars=48, max_words=16, char_filters=16, attn_dim=16,
                    heads=4, ffn_hidden=32, char_out=16, word_filters=16, image_out=16,
                    fusion_hidden=32, fusion_out=16, batch_size=32, epochs=30)
        base.update(changes)
        return cls(**base)

    def model_config(self, vocab: Vocabulary, n_locations: int, image_mode: str = "feature",
                     image_feature_dim: int = 512, grid_channels: int = 3) -> ModelConfig:
        n_chars, n_words, n_tags = vocab.sizes
        return ModelConfig(
            n_chars=n_chars, n_words=n_words, n_hashtags=n_tags, n_locations=n_locations,
            embed_dim=self.embed_dim, max_chars=self.max_chars, max_words=self.max_words,
            char_kernel_sizes=self.char_kernel_sizes, char_filters=self.char_filters,
            attn_dim=self.attn_dim, heads=self.heads, ffn_hidden=self.ffn_hidden,
            char_out=self.char_out, word_kernel_sizes=self.word_kernel_sizes,
            word_filters=self.word_filters, image_mode=image_mode,
            image_feature_dim=image_feature_dim, grid_channels=grid_channels,
            image_out=self.image_out, fusion=self.fusion, fusion_reduce=self.fusion_reduce,
            fusion_hidden=self.fusion_hidden, fusion_out=self.fusion_out, dropout=self.dropout,
            share_char_embeddings=self.share_char_embeddings, modalities=self.modalities)


# -- optimisation -----------------------------------------------------------

def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                 state: list | None, lr: float, decay: float = 0.9, eps: float = 1e-8):
    """One in-place RMSprop update.

    ``s <- decay*s + (1-decay)*g**2`` then ``p <- p - lr*g/sqrt(s + eps)``.
    ``state`` of ``None`` starts from zeros.  Returns the new state.
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state)):
        raise ValueError("params, grads and state must have the same length")
    for p, g, s in zip(params, grads, state):
        if p.shape != g.shape or p.shape != s.shape:
            raise ValueError(f"shape mismatch in rmsprop_step: {p.shape}, {g.shape}, {s.shape}")
        s *= decay
        s += (1.0 - decay) * g * g
        p -= lr * g / np.sqrt(s + eps)
    return state


class RMSprop:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.001, decay: float = 0.9,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.decay, self.eps, self.weight_decay = lr, decay, eps, weight_decay
        self.state = None

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            grads.append(g)
        self.state = rmsprop_step([p.data for p in self.params], grads, self.state,
                                  self.lr, self.decay, self.eps)


class ReduceLROnPlateau:
    """Multiply the lr by ``factor`` after ``patience`` epochs without a strict
    improvement of the monitored loss, then restart the count."""

    def __init__(self, lr: float, factor: float = 0.8, patience: int = 10, floor: float = 1e-6):
        self.lr, self.factor, self.patience, self.floor = lr, factor, patience, floor
        self.best = math.inf
        self.wait = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.wait = 0
        return self.lr


def lr_on_plateau(history: Sequence[float], lr: float, factor: float = 0.8,
                  patience: int = 10, floor: float = 1e-6) -> float:
    """Learning rate after replaying a history of validation losses."""
    if not history:
        raise ValueError("history must not be empty")
    sched = ReduceLROnPlateau(lr, factor, patience, floor)
    for v in history:
        sched.step(v)
    return sched.lr


# -- encoded datasets ---------------------------------------------------------

@dataclass
class EncodedSet:
    post_ids: list
    text_chars: np.ndarray
    tag_chars: np.ndarray
    text_words: np.ndarray
    tag_words: np.ndarray
    image: np.ndarray
    image_present: np.ndarray
    labels: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    image_weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.text_chars[idx], self.tag_chars[idx], self.text_words[idx],
                     self.tag_words[idx], self.image[idx], self.image_present[idx],
                     self.labels[idx],
                     None if self.image_weights is None else self.image_weights[idx], idx)


def encode_posts(posts: Sequence[PostRecord], vocab: Vocabulary, mcfg: ModelConfig) -> EncodedSet:
    n = len(posts)
    arrays = {k: np.zeros((n, mcfg.max_chars), np.int64) for k in ("tc", "gc")}
    arrays.update({k: np.zeros((n, mcfg.max_words), np.int64) for k in ("tw", "gw")})
    present = np.zeros(n, bool)
    weights = None
    if mcfg.image_mode == "feature":
        image = np.zeros((n, mcfg.image_feature_dim))
    else:
        slots = max([len(p.images) for p in posts] + [1])
        shape = next((im.raw_grid.shape for p in posts for im in p.images), None)
        if shape is None:
            shape = (mcfg.grid_channels, 1, 1)
        image = np.zeros((n, slots, *shape))
        weights = np.zeros((n, slots))
    for i, post in enumerate(posts):
        text, tags = encode(post, vocab, mcfg.max_chars, mcfg.max_words)
        arrays["tc"][i], arrays["tw"][i] = text.char_ids, text.word_ids
        arrays["gc"][i], arrays["gw"][i] = tags.char_ids, tags.word_ids
        if mcfg.image_mode == "feature":
            image[i], present[i] = aggregate([im.feature for im in post.images],
                                             mcfg.image_feature_dim)
        elif post.images:
            for k, im in enumerate(post.images):
                image[i, k] = im.raw_grid
            weights[i, :len(post.images)] = 1.0 / len(post.images)
            present[i] = True
    return EncodedSet([p.post_id for p in posts], arrays["tc"], arrays["gc"], arrays["tw"],
                      arrays["gw"], image, present,
                      np.array([p.location_id for p in posts], np.int64),
                      np.array([p.post_lat for p in posts]), np.array([p.post_lon for p in posts]),
                      weights)


@dataclass
class PreparedData:
    train: list[PostRecord]
    val: list[PostRecord]
    test: list[PostRecord]
    vocab: Vocabulary
    locations: LocationTable
    split: DatasetSplit

    @property
    def image_mode(self) -> str:
        im = next((im for p in self.train + self.val + self.test for im in p.images), None)
        return "grid" if im is not None and im.raw_grid is not None else "feature"

    @property
    def image_shape(self) -> tuple:
        im = next((im for p in self.train + self.val + self.test for im in p.images), None)
        return () if im is None else im.values.shape

    def posts(self, name: str) -> list[PostRecord]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def apply_split(posts: Sequence[PostRecord], split: DatasetSplit):
    by_id = {p.post_id: p for p in posts}
    missing = [i for i in split.train + split.val + split.test if i not in by_id]
    if missing:
        raise ConfigError(f"split references unknown post ids, e.g. {missing[0]!r}")
    return ([by_id[i] for i in split.train], [by_id[i] for i in split.val],
            [by_id[i] for i in split.test])


def prepare_data(posts: Sequence[PostRecord], table: LocationTable, cfg: TrainConfig) -> PreparedData:
    """Filter, split and build the vocabulary on the training split."""
    posts, table = filter_dataset(posts, table, cfg.hashtag_min_count, cfg.location_min_posts,
                                  cfg.eta)
    split = stratified_split(posts, cfg.split_ratios, cfg.seed)
    train, val, test = apply_split(posts, split)
    vocab = build_vocab(train, cfg.hashtag_min_count, cfg.embed_dim)
    return PreparedData(train, val, test, vocab, table, split)


def load_prepared(path, cfg: TrainConfig) -> PreparedData:
    """Load either a processed dataset directory or a raw manifest.

    A processed directory (output of ``prep``) is used as-is; a raw
    manifest goes through :func:`prepare_data` with ``cfg``.
    """
    path = Path(path)
    if path.is_dir():
        posts, table = load_and_validate(path / "manifest.json")
        split = DatasetSplit.from_dict(json.loads((path / "splits.json").read_text()))
        vocab = Vocabulary.load(path / "vocab.json")
        train, val, test = apply_split(posts, split)
        return PreparedData(train, val, test, vocab, table, split)
    posts, table = load_and_validate(path)
    return prepare_data(posts, table, cfg)


# -- evaluation ---------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    mean_km: float
    confusion: np.ndarray
    loss: float
    n: int
    curves: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mean_km": self.mean_km, "loss": self.loss,
                "n": self.n, "confusion": self.confusion.tolist()}

    def __eq__(self, other) -> bool:
        return (isinstance(other, Metrics) and self.accuracy == other.accuracy
                and self.mean_km == other.mean_km and self.loss == other.loss
                and self.n == other.n and np.array_equal(self.confusion, other.confusion))


def score_predictions(pred: np.ndarray, enc: EncodedSet, table: LocationTable,
                      mean_mode: str = "center_to_post", loss: float = float("nan")) -> Metrics:
    """Accuracy, mean haversine error and confusion counts for predictions."""
    m = len(table)
    truth = enc.labels
    confusion = np.zeros((m, m), np.int64)
    np.add.at(confusion, (truth, pred), 1)
    n = len(truth)
    if n == 0:
        return Metrics(float("nan"), float("nan"), confusion, loss, 0)
    centers = table.centers()
    if mean_mode == "center_to_post":
        dist = haversine_km(centers[pred, 0], centers[pred, 1], enc.lat, enc.lon)
    else:
        dist = haversine_km(centers[pred, 0], centers[pred, 1], centers[truth, 0], centers[truth, 1])
    return Metrics(float(np.mean(pred == truth)), float(np.mean(dist)), confusion, loss, n)


def predict_set(params: dict, mcfg: ModelConfig, enc: EncodedSet, batch_size: int = 256):
    """Argmax labels and mean loss over an encoded set (eval mode)."""
    preds, total = [], 0.0
    with no_grad():
        for start in range(0, len(enc), batch_size):
            b = enc.batch(np.arange(start, min(start + batch_size, len(enc))))
            scores = forward(params, mcfg, b, training=False)
            total += F.cross_entropy(scores, b.labels).item() * len(b)
            preds.append(np.argmax(scores.data, axis=1))
    if not preds:
        return np.zeros(0, np.int64), float("nan")
    return np.concatenate(preds), total / len(enc)


def evaluate_params(params: dict, mcfg: ModelConfig, enc: EncodedSet, table: LocationTable,
                    mean_mode: str = "center_to_post", batch_size: int = 256) -> Metrics:
    pred, loss = predict_set(params, mcfg, enc, batch_size)
    return score_predictions(pred, enc, table, mean_mode, loss)


def evaluate(checkpoint: Checkpoint | str | Path, posts: Sequence[PostRecord], table: LocationTable,
             mean_mode: str = "center_to_post") -> Metrics:
    """Metrics of a checkpoint on ``posts`` labelled against ``table``."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    mcfg = checkpoint.model_config
    if len(table) != mcfg.n_locations:
        raise CheckpointError(f"checkpoint predicts {mcfg.n_locations} locations, "
                              f"dataset has {len(table)}")
    for p in posts:
        for im in p.images:
            if mcfg.image_mode == "feature" and (im.feature is None
                                                 or im.feature.size != mcfg.image_feature_dim):
                raise CheckpointError("image features do not match the checkpoint")
    enc = encode_posts(posts, checkpoint.vocab, mcfg)
    return evaluate_params(checkpoint.params, mcfg, enc, table, mean_mode)


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    history: list
    initial_loss: float
    best_epoch: int
    data: PreparedData
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def _param_norms(params: dict) -> dict:
    return {k: float(np.linalg.norm(v.data)) for k, v in params.items()}


def build_model(cfg: TrainConfig, data: PreparedData) -> ModelConfig:
    mode = data.image_mode
    shape = data.image_shape
    if mode == "feature":
        return cfg.model_config(data.vocab, len(data.locations), "feature",
                                image_feature_dim=int(shape[0]) if shape else 512)
    return cfg.model_config(data.vocab, len(data.locations), "grid", grid_channels=int(shape[0]))


def fit(cfg: TrainConfig, data: PreparedData,
        on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch; keeps the parameters of the best validation epoch."""
    mcfg = build_model(cfg, data)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, shuffle_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    params = init_params(mcfg, init_rng)
    leaves = list(params.values())

    train_set = encode_posts(data.train, data.vocab, mcfg)
    val_set = encode_posts(data.val, data.vocab, mcfg)
    _, initial_loss = predict_set(params, mcfg, train_set)

    opt = RMSprop(leaves, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps, cfg.weight_decay)
    sched = ReduceLROnPlateau(cfg.learning_rate, cfg.lr_factor, cfg.lr_patience, cfg.lr_floor)
    best_loss, best_epoch = math.inf, 0
    best = {k: v.data.copy() for k, v in params.items()}
    history = []
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b_id, start in enumerate(range(0, n, cfg.batch_size)):
            batch = train_set.batch(order[start:start + cfg.batch_size])
            try:
                scores = forward(params, mcfg, batch, training=True, rng=drop_rng)
                loss = F.cross_entropy(scores, batch.labels)
                backward(loss, leaves)
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}, batch {b_id}: {exc}; "
                    f"param norms {_param_norms(params)}") from exc
            opt.step()
            total += loss.item() * len(batch)
        train_loss = total / n
        if len(val_set):
            val = evaluate_params(params, mcfg, val_set, data.locations, cfg.mean_mode)
            monitored = val.loss
        else:
            val = Metrics(float("nan"), float("nan"), np.zeros((0, 0)), float("nan"), 0)
            monitored = train_loss
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val.loss,
               "val_acc": val.accuracy, "val_mean_km": val.mean_km, "lr": opt.lr}
        history.append(row)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f lr %.2e", epoch,
                 train_loss, val.loss, val.accuracy, opt.lr)
        if on_epoch:
            on_epoch(row)
        if monitored < best_loss:
            best_loss, best_epoch = monitored, epoch
            best = {k: v.data.copy() for k, v in params.items()}
        opt.lr = sched.step(monitored)

    for k, v in params.items():
        v.data = best[k]
    return TrainResult(params, mcfg, history, initial_loss, best_epoch, data)


def format_metrics_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def train(cfg: TrainConfig, data_path, out_dir,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on a dataset and write ``checkpoint.bin`` and ``metrics.csv``."""
    data = load_prepared(data_path, cfg)
    result = fit(cfg, data, on_epoch)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint_path = save_checkpoint(out / "checkpoint.bin", result.params,
                                             result.model_config, data.vocab, data.locations,
                                             cfg.to_dict())
    result.metrics_path = out / "metrics.csv"
    result.metrics_path.write_text(format_metrics_csv(result.history))
    return result


# -- ablations ----------------------------------------------------------------

def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Apply a ``+``-joined list of modifiers, e.g. ``image-only+eta-1.0``.

    Modifiers: ``full``, ``drop-text``, ``drop-tags``, ``drop-image``,
    ``image-only``, ``fusion-early``, ``fusion-late``, ``fusion-none``,
    ``eta-<x>`` and ``min-count-<n>``.
    """
    cfg = base
    for mod in variant.split("+"):
        if mod == "full":
            continue
        if mod in ("drop-text", "drop-tags", "drop-image"):
            gone = mod.split("-", 1)[1]
            cfg = cfg.replace(modalities=tuple(m for m in cfg.modalities if m != gone))
        elif mod == "image-only":
            cfg = cfg.replace(modalities=("image",))
        elif mod.startswith("fusion-") and mod[7:] in ("early", "late", "none"):
            cfg = cfg.replace(fusion=mod[7:])
        elif mod.startswith("eta-"):
            try:
                cfg = cfg.replace(eta=float(mod[4:]))
            except ValueError:
                raise ConfigError(f"bad eta in variant {variant!r}") from None
        elif mod.startswith("min-count-"):
            try:
                cfg = cfg.replace(hashtag_min_count=int(mod[10:]))
            except ValueError:
                raise ConfigError(f"bad min count in variant {variant!r}") from None
        else:
            raise ConfigError(f"unknown variant {mod!r}")
    return cfg


def ablate(base: TrainConfig, variants: Sequence[str], posts: Sequence[PostRecord],
           table: LocationTable, out_dir=None) -> list[dict]:
    """Train and test every variant under the same seed and epoch budget.

    Returns one row per variant; with ``out_dir`` also writes
    ``ablation.csv``.
    """
    configs = [(v, variant_config(base, v)) for v in variants]  # validate names up front
    rows = []
    for name, cfg in configs:
        data = prepare_data(posts, table, cfg)
        result = fit(cfg, data)
        test = encode_posts(data.test, data.vocab, result.model_config)
        m = evaluate_params(result.params, result.model_config, test, data.locations, cfg.mean_mode)
        rows.append({"variant": name, "acc": m.accuracy, "mean_km": m.mean_km,
                     "config_hash": cfg.config_hash(), "config": cfg})
        log.info("variant %s acc %.4f mean_km %.4f", name, m.accuracy, m.mean_km)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(format_ablation_csv(rows))
    return rows


def format_ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "acc", "mean_km", "config_hash"])
    for r in rows:
        writer.writerow([r["variant"], repr(r["acc"]), repr(r["mean_km"]), r["config_hash"]])
    return buf.getvalue()


def format_table(rows: Sequence[dict]) -> str:
    width = max([len("variant")] + [len(r["variant"]) for r in rows])
    lines = [f"{'variant':<{width}}  {'acc':>7}  {'mean_km':>8}  config_hash"]
    for r in rows:
        lines.append(f"{r['variant']:<{width}}  {r['acc']:>7.4f}  {r['mean_km']:>8.4f}  "
                     f"{r['config_hash']}")
    return "\n".join(lines)
