"""Identity-labelled datasets and identity-composed minibatches.

Every example carries an input ``x``, a class label ``t`` and an identity
``p``. Labels and identities are 0-based.
"""

from __future__ import annotations

import io
import json
import os
import pickle
import tarfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError


@dataclass
class IdentityDataset:
    x: torch.Tensor
    t: torch.Tensor
    p: torch.Tensor
    num_classes: int
    num_identities: int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.t.shape[0] != n or self.p.shape[0] != n:
            raise ConfigurationError("x, t, p lengths differ")
        if n and (int(self.t.min()) < 0 or int(self.t.max()) >= self.num_classes):
            raise ConfigurationError("class label out of range")
        if n and (int(self.p.min()) < 0 or int(self.p.max()) >= self.num_identities):
            raise ConfigurationError("identity out of range")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return IdentityDataset(self.x[idx], self.t[idx], self.p[idx],
                               self.num_classes, self.num_identities, self.manifest)

    def identities(self):
        return sorted(set(self.p.tolist()))

    def indices_of(self, identity):
        return torch.nonzero(self.p == identity).flatten()


def split_holdout(ds, frac=0.25):
    """Per identity, the last ``frac`` of its examples (dataset order) are held out."""
    train, held = [], []
    for p in ds.identities():
        idx = ds.indices_of(p).tolist()
        n_hold = int(round(len(idx) * frac))
        cut = len(idx) - n_hold
        train.extend(idx[:cut])
        held.extend(idx[cut:])
    return ds.subset(sorted(train)), ds.subset(sorted(held))


LAYOUTS = ("partition", "crossed")
PATTERNS = ("grating", "pair")


def _grating(theta, freq, xx, yy, phase):
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    return np.cos(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])


def _class_pattern(t, K, xx, yy, phase, pattern):
    if pattern == "grating":
        return _grating(np.pi * t / K, 2.0 + (t % 2), xx, yy, phase)
    # pair: left and right halves carry one of two orientations each; the class
    # is the ordered pair, so pooled orientation energy alone cannot separate
    # (A, B) from (B, A)
    left = t % 2
    right = (t // 2) % 2
    f = np.full(len(t), 3.0)
    g_left = _grating(np.pi / 4 + left * np.pi / 2, f, xx, yy, phase)
    g_right = _grating(np.pi / 4 + right * np.pi / 2, f, xx, yy, phase)
    return np.where(xx[None] < 0.5, g_left, g_right)


def synth_identity_dataset(K=4, P=8, samples_per_identity=200, noise_level=0.5, seed=0,
                           size=16, channels=3, identity_scale=0.5, jitter=0.0,
                           layout="partition", pattern="grating"):
    """Oriented-grating classes with a fixed per-identity colour shift and
    blocky bias pattern, a per-sample colour jitter of scale ``jitter``, plus
    i.i.d. Gaussian noise.

    ``partition``: with ``K == P`` identity and class coincide; otherwise
    ``P`` must be a multiple of ``K`` and identity ``p`` belongs to class
    ``p % K``. ``crossed``: every identity has examples of every class
    (sample ``i`` of an identity has class ``i % K``), like speakers each
    uttering every keyword.
    """
    if min(K, P, samples_per_identity, size, channels) < 1:
        raise ConfigurationError("all counts must be >= 1")
    if pattern not in PATTERNS:
        raise ConfigurationError(f"pattern must be one of {PATTERNS}, got {pattern!r}")
    if pattern == "pair" and K != 4:
        raise ConfigurationError("pair pattern defines exactly 4 classes")
    if layout not in LAYOUTS:
        raise ConfigurationError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    if layout == "partition" and K != P and P % K != 0:
        raise ConfigurationError(f"P={P} is not a multiple of K={K}")
    if layout == "crossed" and samples_per_identity < K:
        raise ConfigurationError("crossed layout needs samples_per_identity >= K")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    block = max(size // 4, 1)

    xs, ts, ps, idents = [], [], [], []
    for p in range(P):
        if layout == "crossed":
            t = np.arange(samples_per_identity) % K
        else:
            t = np.full(samples_per_identity, p % K)
        shift = rng.normal(0.0, identity_scale, size=channels)
        coarse = rng.normal(0.0, identity_scale, size=(channels, size // block, size // block))
        bias = np.kron(coarse, np.ones((block, block)))
        idents.append({"identity": p, "classes": sorted(set(t.tolist())),
                       "color_shift": shift.tolist(), "bias_coarse": coarse.tolist()})
        phase = rng.uniform(0, 2 * np.pi, size=samples_per_identity)
        amp = rng.uniform(0.8, 1.2, size=samples_per_identity)
        grating = amp[:, None, None] * _class_pattern(t, K, xx, yy, phase, pattern)
        jit = rng.normal(0.0, jitter, size=(samples_per_identity, channels)) if jitter else \
            np.zeros((samples_per_identity, channels))
        noise = rng.normal(0.0, noise_level, size=(samples_per_identity, channels, size, size))
        x = grating[:, None] + (shift + jit)[:, :, None, None] + bias[None] + noise
        xs.append(x.astype(np.float32))
        ts.append(t)
        ps.append(np.full(samples_per_identity, p))

    t_all, p_all = np.concatenate(ts), np.concatenate(ps)
    counts = {}
    for t, p in zip(t_all.tolist(), p_all.tolist()):
        counts[f"{t},{p}"] = counts.get(f"{t},{p}", 0) + 1
    manifest = {"kind": "synthetic", "layout": layout, "pattern": pattern, "K": K, "P": P, "samples_per_identity": samples_per_identity,
                "noise_level": noise_level, "seed": seed, "size": size, "channels": channels,
                "identity_scale": identity_scale, "jitter": jitter,
                "counts": counts, "identities": idents}
    return IdentityDataset(torch.from_numpy(np.concatenate(xs)), torch.from_numpy(t_all).long(),
                           torch.from_numpy(p_all).long(), K, P, manifest)


def save_manifest(ds, path):
    with open(path, "w") as f:
        json.dump(ds.manifest, f, indent=1, sort_keys=True)
        f.write("\n")


@dataclass
class BatchComposition:
    identities_per_batch: int = 4
    samples_per_identity: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.identities_per_batch < 1 or self.samples_per_identity < 1:
            raise ConfigurationError("batch composition counts must be >= 1")

    @property
    def batch_size(self):
        return self.identities_per_batch * self.samples_per_identity

    def check_training(self):
        if self.samples_per_identity < 2:
            raise ConfigurationError("training needs samples_per_identity >= 2")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown batch keys: {sorted(unknown)}")
        return cls(**d)


class IdentityBatchSampler:
    """Yields index arrays; each batch holds ``identities_per_batch`` distinct
    identities with ``samples_per_identity`` examples each.

    Within an epoch examples are drawn without replacement. Identities with
    the most unused chunks are served first, so an epoch stays balanced.
    """

    def __init__(self, identities, composition: BatchComposition):
        self.comp = composition
        ids = np.asarray(identities)
        self.groups = {int(p): np.flatnonzero(ids == p) for p in np.unique(ids)}
        if len(self.groups) < composition.identities_per_batch:
            raise ConfigurationError(
                f"{len(self.groups)} identities available, batches need {composition.identities_per_batch}")
        small = [p for p, g in self.groups.items() if len(g) < composition.samples_per_identity]
        if small:
            raise ConfigurationError(f"identities {small} have fewer than "
                                     f"{composition.samples_per_identity} examples")
        self.rng = np.random.default_rng(composition.seed)

    def __iter__(self):
        k, s = self.comp.identities_per_batch, self.comp.samples_per_identity
        chunks = {}
        for p, g in self.groups.items():
            perm = self.rng.permutation(g)
            n = len(perm) // s
            chunks[p] = [perm[i * s:(i + 1) * s] for i in range(n)]
        while True:
            live = [p for p, c in chunks.items() if c]
            if len(live) < k:
                return
            tiebreak = self.rng.permutation(len(live))
            order = sorted(range(len(live)), key=lambda i: (-len(chunks[live[i]]), tiebreak[i]))
            chosen = [live[i] for i in order[:k]]
            yield np.concatenate([chunks[p].pop() for p in chosen])

    def __len__(self):
        k, s = self.comp.identities_per_batch, self.comp.samples_per_identity
        per = sorted((len(g) // s for g in self.groups.values()), reverse=True)
        # upper bound when chunk counts are equal across identities
        return sum(per) // k


def identity_batch_sampler(dataset, composition):
    return IdentityBatchSampler(dataset.p.numpy(), composition)


# ---------------------------------------------------------------------------
# CIFAR ingestion

_CIFAR_LAYOUTS = {
    "cifar10": {"dir": "cifar-10-batches-py", "train": [f"data_batch_{i}" for i in range(1, 6)],
                "test": ["test_batch"], "label": b"labels", "K": 10},
    "cifar100": {"dir": "cifar-100-python", "train": ["train"], "test": ["test"],
                 "label": b"fine_labels", "K": 100},
}


def _detect(path):
    if os.path.isdir(path):
        for name, lay in _CIFAR_LAYOUTS.items():
            if os.path.basename(os.path.normpath(path)) == lay["dir"]:
                return name, ("dir", path)
            if os.path.isdir(os.path.join(path, lay["dir"])):
                return name, ("dir", os.path.join(path, lay["dir"]))
    elif os.path.isfile(path) and tarfile.is_tarfile(path):
        with tarfile.open(path) as tf:
            names = tf.getnames()
        for name, lay in _CIFAR_LAYOUTS.items():
            if any(n.startswith(lay["dir"]) for n in names):
                return name, ("tar", path)
    raise IngestionError(f"{path}: no CIFAR-10/100 python archive found")


def _read_batches(source, layout, files):
    kind, root = source
    out = []
    tf = tarfile.open(root) if kind == "tar" else None
    try:
        for fname in files:
            rel = f"{layout['dir']}/{fname}"
            try:
                if tf is not None:
                    raw = tf.extractfile(rel).read()
                else:
                    with open(os.path.join(root, fname), "rb") as f:
                        raw = f.read()
                batch = pickle.load(io.BytesIO(raw), encoding="bytes")
                data = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
                labels = np.asarray(batch[layout["label"]], dtype=np.int64)
            except (OSError, KeyError, AttributeError, ValueError, pickle.UnpicklingError, EOFError) as e:
                raise IngestionError(f"{root}:{fname}: cannot read CIFAR batch ({e})") from e
            if len(labels) != len(data):
                raise IngestionError(f"{root}:{fname}: {len(data)} images but {len(labels)} labels")
            out.append((data, labels))
    finally:
        if tf is not None:
            tf.close()
    return np.concatenate([d for d, _ in out]), np.concatenate([l for _, l in out])


def stratified_subset(labels, n, seed=0):
    """Indices of exactly ``n`` examples, classes taken round-robin."""
    labels = np.asarray(labels)
    if n > len(labels):
        raise ConfigurationError(f"subset of {n} requested from {len(labels)} examples")
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)]
    picked = []
    while len(picked) < n:
        for pool in pools:
            if pool and len(picked) < n:
                picked.append(pool.pop())
    return np.sort(np.asarray(picked))


def image_dataset_loader(path, split="train", subset=None, seed=0):
    """Load CIFAR-10/100 (python pickle layout, directory or tar archive).

    Inputs are standardized per channel with training-split statistics; the
    identity of every image is its class label.
    """
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    if not os.path.exists(path):
        raise IngestionError(f"{path}: no such file or directory")
    name, source = _detect(path)
    layout = _CIFAR_LAYOUTS[name]
    train_x, train_y = _read_batches(source, layout, layout["train"])
    mean = train_x.astype(np.float64).mean(axis=(0, 2, 3))
    std = train_x.astype(np.float64).std(axis=(0, 2, 3))
    if split == "train":
        x, y = train_x, train_y
    else:
        x, y = _read_batches(source, layout, layout["test"])
    if subset is not None:
        idx = stratified_subset(y, subset, seed)
        x, y = x[idx], y[idx]
    xf = ((x.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    K = layout["K"]
    manifest = {"kind": name, "split": split, "path": str(path), "K": K, "P": K,
                "n": int(len(y)), "channel_mean": mean.tolist(), "channel_std": std.tolist()}
    t = torch.from_numpy(y).long()
    return IdentityDataset(torch.from_numpy(xf), t, t.clone(), K, K, manifest)
