"""Datasets, synthetic generators, fold splits and task metrics.

Sequence instances are ``(X, y)`` with ``X`` of shape (L, F) and integer
labels ``y`` of length L.  Segmentation instances store flattened pixels,
``X`` of shape (H*W, F) and a binary mask of length H*W.
"""

import json
import string
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import make_rng

OCR_PIXELS = 128
OCR_LETTERS = string.ascii_lowercase
CACHE_FORMAT = "scalecrf.dataset"
CACHE_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class SequenceDataset:
    features: list  # (L, F) float arrays
    labels: list  # (L,) int arrays
    n_labels: int
    n_features: int
    folds: np.ndarray  # one fold id per instance
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.features) != len(self.labels) or len(self.features) != len(self.folds):
            raise ValueError("features, labels and folds must align")
        for x, y in zip(self.features, self.labels):
            if x.shape != (len(y), self.n_features):
                raise ValueError(f"instance shape {x.shape} inconsistent with {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.n_labels):
                raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = list(idx)
        return SequenceDataset([self.features[i] for i in idx], [self.labels[i] for i in idx],
                               self.n_labels, self.n_features, self.folds[idx], dict(self.meta))


@dataclass
class SegmentationDataset:
    features: list  # (H*W, F)
    masks: list  # (H*W,) in {0, 1}
    height: int
    width: int
    n_features: int
    folds: np.ndarray
    meta: dict = field(default_factory=dict)

    n_labels = 2

    def __post_init__(self):
        L = self.height * self.width
        for x, m in zip(self.features, self.masks):
            if x.shape != (L, self.n_features) or m.shape != (L,):
                raise ValueError("pixel count must equal height * width")
            if np.any((m != 0) & (m != 1)):
                raise ValueError("mask values must be 0 or 1")

    @property
    def labels(self):
        return self.masks

    def __len__(self):
        return len(self.masks)

    def subset(self, idx):
        idx = list(idx)
        return SegmentationDataset([self.features[i] for i in idx], [self.masks[i] for i in idx],
                                   self.height, self.width, self.n_features, self.folds[idx],
                                   dict(self.meta))


# ---------------------------------------------------------------------------
# Taskar OCR letter.data
# ---------------------------------------------------------------------------


def load_taskar_ocr(path):
    """Parse ``letter.data`` and chain letters into words via ``next_id``.

    Row layout (tab separated): id, letter, next_id, word_id, position,
    fold, then 128 binary pixels of the 16x8 image.
    """
    rows = {}
    order = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\t")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6 + OCR_PIXELS:
                raise DataFormatError(f"line {lineno}: expected {6 + OCR_PIXELS} fields, got {len(parts)}")
            try:
                lid, nxt, fold = int(parts[0]), int(parts[2]), int(parts[5])
                pixels = [int(v) for v in parts[6:]]
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            letter = parts[1]
            if letter not in OCR_LETTERS:
                raise DataFormatError(f"line {lineno}: bad letter {letter!r}")
            if any(v not in (0, 1) for v in pixels):
                raise DataFormatError(f"line {lineno}: pixel value not in {{0, 1}}")
            if lid in rows:
                raise DataFormatError(f"line {lineno}: duplicate id {lid}")
            rows[lid] = (lineno, OCR_LETTERS.index(letter), nxt, fold, pixels)
            order.append(lid)

    targets = {r[2] for r in rows.values() if r[2] != -1}
    for lid, (lineno, _, nxt, _, _) in rows.items():
        if nxt != -1 and nxt not in rows:
            raise DataFormatError(f"line {lineno}: next_id {nxt} does not exist")
    features, labels, folds = [], [], []
    seen = set()
    for start in order:
        if start in targets:
            continue
        word_x, word_y = [], []
        cur = start
        while cur != -1:
            if cur in seen:
                raise DataFormatError(f"line {rows[cur][0]}: next_id chain revisits id {cur}")
            seen.add(cur)
            _, lab, nxt, fold, pixels = rows[cur]
            word_x.append(pixels)
            word_y.append(lab)
            cur = nxt
        features.append(np.array(word_x, dtype=np.float64))
        labels.append(np.array(word_y, dtype=np.int64))
        folds.append(rows[start][3])
    if len(seen) != len(rows):
        missing = min(rows[i][0] for i in rows if i not in seen)
        raise DataFormatError(f"line {missing}: letter not reachable from any word start (cycle)")
    return SequenceDataset(features, labels, len(OCR_LETTERS), OCR_PIXELS,
                           np.array(folds, dtype=np.int64), {"source": "taskar_ocr"})


def write_taskar_ocr(ds, path):
    """Inverse of :func:`load_taskar_ocr` (ids are renumbered from 1)."""
    lid = 1
    with open(path, "w") as fh:
        for w, (x, y) in enumerate(zip(ds.features, ds.labels)):
            for pos, (pix, lab) in enumerate(zip(x, y)):
                nxt = lid + 1 if pos + 1 < len(y) else -1
                fields = [lid, OCR_LETTERS[lab], nxt, w + 1, pos + 1, int(ds.folds[w])]
                fields += [int(v) for v in pix]
                fh.write("\t".join(str(f) for f in fields) + "\n")
                lid += 1


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------


def synth_sequences(seed, n, length_range, n_labels, n_features, unary_snr,
                    transition_strength, n_folds=10):
    """Markov-chain label sequences with weak one-hot features.

    Transitions follow ``softmax(transition_strength * G)`` row-wise for a
    Gaussian matrix ``G``; the first label is uniform.  Features are
    ``unary_snr * onehot(label)`` (zero-padded to ``n_features``) plus unit
    Gaussian noise.  Folds are assigned round-robin.
    """
    lo, hi = length_range
    if n_labels < 2 or n_features < n_labels:
        raise ValueError("need n_labels >= 2 and n_features >= n_labels")
    if n < 1 or lo < 1 or hi < lo:
        raise ValueError("invalid size or length range")
    if unary_snr < 0 or transition_strength < 0:
        raise ValueError("snr and transition strength must be nonnegative")
    rng = make_rng(seed)
    logits = transition_strength * rng.normal(size=(n_labels, n_labels))
    trans = np.exp(logits - logits.max(axis=1, keepdims=True))
    trans /= trans.sum(axis=1, keepdims=True)
    features, labels = [], []
    for _ in range(n):
        L = int(rng.integers(lo, hi + 1))
        y = np.empty(L, dtype=np.int64)
        y[0] = rng.integers(n_labels)
        for j in range(1, L):
            y[j] = rng.choice(n_labels, p=trans[y[j - 1]])
        x = rng.normal(size=(L, n_features))
        x[np.arange(L), y] += unary_snr
        features.append(x)
        labels.append(y)
    meta = {
        "generator": "synth_seq", "seed": seed, "unary_snr": unary_snr,
        "transition_strength": transition_strength,
        "log_transitions": np.log(trans).tolist(),
    }
    return SequenceDataset(features, labels, n_labels, n_features,
                           np.arange(n) % n_folds, meta)


def synth_segmentation(seed, n, height, width, n_features, snr, smoothness=None, n_folds=5):
    """Smooth random binary masks with noisy per-pixel evidence.

    Masks threshold Gaussian-filtered white noise at zero; each feature
    channel is ``snr * (2 mask - 1)`` plus unit Gaussian noise.
    """
    if height < 2 or width < 2 or n < 1 or n_features < 1:
        raise ValueError("invalid dimensions")
    if snr < 0:
        raise ValueError("snr must be nonnegative")
    sigma = smoothness if smoothness is not None else min(height, width) / 5.0
    rng = make_rng(seed)
    features, masks = [], []
    for _ in range(n):
        field_ = gaussian_filter(rng.normal(size=(height, width)), sigma, mode="wrap")
        mask = (field_ > 0).astype(np.int64).ravel()
        x = rng.normal(size=(height * width, n_features)) + snr * (2.0 * mask - 1.0)[:, None]
        features.append(x)
        masks.append(mask)
    meta = {"generator": "synth_seg", "seed": seed, "snr": snr, "smoothness": sigma}
    return SegmentationDataset(features, masks, height, width, n_features,
                               np.arange(n) % n_folds, meta)


def window_features(ds, radius=1):
    """Concatenate each pixel's (2r+1)^2 neighbourhood (zero padded)."""
    h, w, F = ds.height, ds.width, ds.n_features
    out = []
    for x in ds.features:
        img = np.pad(x.reshape(h, w, F), ((radius, radius), (radius, radius), (0, 0)))
        parts = [img[dy:dy + h, dx:dx + w] for dy in range(2 * radius + 1)
                 for dx in range(2 * radius + 1)]
        out.append(np.concatenate(parts, axis=2).reshape(h * w, -1))
    k = (2 * radius + 1) ** 2
    return SegmentationDataset(out, list(ds.masks), h, w, k * F, ds.folds.copy(), dict(ds.meta))


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def split_folds(ds, val_folds, test_folds):
    """Return ``(train, val, test)`` subsets by fold id."""
    val_folds, test_folds = set(val_folds), set(test_folds)
    if val_folds & test_folds:
        raise ValueError("validation and test folds overlap")
    train = [i for i, f in enumerate(ds.folds) if f not in val_folds | test_folds]
    val = [i for i, f in enumerate(ds.folds) if f in val_folds]
    test = [i for i, f in enumerate(ds.folds) if f in test_folds]
    if not train or not val or not test:
        raise ValueError("every split needs at least one instance")
    return ds.subset(train), ds.subset(val), ds.subset(test)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric_accuracy(preds, golds):
    """Mean over sequences of per-sequence accuracy."""
    if len(preds) != len(golds) or not golds:
        raise ValueError("prediction/gold count mismatch")
    accs = []
    for p, g in zip(preds, golds):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        accs.append(np.mean(p == g))
    return float(np.mean(accs))


def metric_iou(preds, golds):
    """Mean over images of |pred & gold| / |pred | gold|; empty union counts as 1."""
    if len(preds) != len(golds) or not golds:
        raise ValueError("prediction/gold count mismatch")
    scores = []
    for p, g in zip(preds, golds):
        p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        union = np.logical_or(p, g).sum()
        scores.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------


def save_dataset(ds, path):
    """Versioned ``.npz`` cache (concatenated rows + per-instance lengths)."""
    lengths = np.array([len(y) for y in ds.labels], dtype=np.int64)
    header = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "meta": ds.meta}
    if isinstance(ds, SegmentationDataset):
        header.update(kind="segmentation", height=ds.height, width=ds.width,
                      n_features=ds.n_features)
    else:
        header.update(kind="sequence", n_labels=ds.n_labels, n_features=ds.n_features)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 features=np.concatenate(ds.features, axis=0),
                 labels=np.concatenate(ds.labels), lengths=lengths, folds=ds.folds)


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise DataFormatError(f"{path}: not a version {CACHE_VERSION} dataset cache")
        bounds = np.cumsum(z["lengths"])[:-1]
        feats = np.split(z["features"], bounds)
        labs = np.split(z["labels"], bounds)
        folds = z["folds"]
    if header["kind"] == "segmentation":
        return SegmentationDataset(feats, labs, header["height"], header["width"],
                                   header["n_features"], folds, header["meta"])
    return SequenceDataset(feats, labs, header["n_labels"], header["n_features"], folds,
                           header["meta"])
