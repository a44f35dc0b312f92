"""Dataset ingestion and synthesis: CSV manifests, the CelebA attribute
importer, a seeded synthetic ground-truth dataset, and batch iteration."""

import csv
import dataclasses
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import zoom

from . import warp

MULTI_BINARY = "multi_binary"
ONE_HOT = "one_hot"


class ManifestError(ValueError):
    pass


@dataclasses.dataclass
class Record:
    image_path: str
    identity: int
    split: str  # "train" or "test"
    labels: np.ndarray  # float vector, entries in {0, 1}
    # In-memory float image (H, W, 3) in [0, 1]; set for synthetic records.
    image: np.ndarray | None = None
    # Directory that relative image_path entries are resolved against.
    base_dir: str | None = None

    def load_image(self):
        if self.image is not None:
            return self.image
        path = Path(self.image_path)
        if not path.is_absolute() and self.base_dir:
            path = Path(self.base_dir) / path
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
        return arr / 255.0


@dataclasses.dataclass
class SyntheticRecord(Record):
    true_texture: np.ndarray | None = None  # (H, W, 3)
    true_grid: np.ndarray | None = None     # (H, W, 2)


@dataclasses.dataclass
class Manifest:
    records: list
    vocabulary: list
    label_mode: str = MULTI_BINARY

    def __post_init__(self):
        if not self.vocabulary:
            raise ManifestError("vocabulary must be non-empty")
        if self.label_mode not in (MULTI_BINARY, ONE_HOT):
            raise ManifestError(f"unknown label mode {self.label_mode!r}")
        k = len(self.vocabulary)
        for i, rec in enumerate(self.records):
            rec.labels = np.asarray(rec.labels, dtype=np.float32)
            if rec.labels.shape != (k,):
                raise ManifestError(f"record {i}: label length != |vocabulary|")
            if rec.identity < 0:
                raise ManifestError(f"record {i}: identity must be >= 0")
            if self.label_mode == ONE_HOT and rec.labels.sum() != 1.0:
                raise ManifestError(f"record {i}: one-hot label does not sum to 1")

    def __len__(self):
        return len(self.records)

    def subset(self, split):
        return Manifest(
            [r for r in self.records if r.split == split],
            self.vocabulary,
            self.label_mode,
        )

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["path", "identity", "split", *self.vocabulary])
            for rec in self.records:
                writer.writerow(
                    [rec.image_path, rec.identity, rec.split]
                    + [int(v) for v in rec.labels]
                )


def load_manifest_csv(path, label_mode=MULTI_BINARY):
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:3] != ["path", "identity", "split"]:
        raise ManifestError(f"{path}: missing manifest header")
    vocabulary = rows[0][3:]
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3 + len(vocabulary):
            raise ManifestError(f"{path}:{lineno}: wrong column count")
        records.append(
            Record(
                image_path=row[0],
                identity=int(row[1]),
                split=row[2],
                labels=np.array([float(v) for v in row[3:]], dtype=np.float32),
                base_dir=str(path.parent),
            )
        )
    return Manifest(records, vocabulary, label_mode)


def load_celeba_attributes(path, selected, split="train"):
    """Import the CelebA attribute list file into a multi-binary Manifest.

    Layout: line 1 holds the image count, line 2 the 40 attribute names,
    then one `filename flag...` row per image with flags in {-1, +1}.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise ManifestError(f"{path}: truncated attribute file")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ManifestError(f"{path}:1: expected an image count") from None
    names = lines[1].split()
    unknown = [s for s in selected if s not in names]
    if unknown:
        raise ManifestError(f"{path}:2: unknown attribute name(s) {unknown}")
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != count:
        raise ManifestError(
            f"{path}: header says {count} images but found {len(body)} rows"
        )
    cols = [names.index(s) for s in selected]
    records = []
    for lineno, line in enumerate(body, start=3):
        parts = line.split()
        if len(parts) != 1 + len(names):
            raise ManifestError(f"{path}:{lineno}: expected {1 + len(names)} fields")
        flags = []
        for c in cols:
            v = parts[1 + c]
            if v not in ("-1", "1", "+1"):
                raise ManifestError(f"{path}:{lineno}: flag {v!r} not in {{-1,+1}}")
            flags.append(1.0 if v in ("1", "+1") else 0.0)
        records.append(
            Record(
                image_path=str(path.parent / parts[0]),
                identity=lineno - 3,
                split=split,
                labels=np.array(flags, dtype=np.float32),
            )
        )
    return Manifest(records, list(selected), MULTI_BINARY)


@dataclasses.dataclass
class SyntheticSpec:
    image_size: int = 32
    n_identities: int = 20
    n_images: int = 2000
    attributes: tuple = ("glasses", "smile")
    deformation_magnitude: float = 0.25
    seed: int = 0
    test_fraction: float = 0.1

    def validate(self):
        if self.n_images == 0:
            raise ManifestError("empty spec: n_images must be > 0")
        if self.image_size < 8:
            raise ManifestError("image_size must be >= 8")
        if self.n_images < self.n_identities:
            raise ManifestError("need n_images >= n_identities")
        if not 0.0 <= self.deformation_magnitude <= 1.0:
            raise ManifestError("deformation_magnitude must be in [0, 1]")


def _smooth_field(rng, h, w, lo, hi, coarse=5):
    """Low-frequency random field in [lo, hi] via bicubic upsampling."""
    noise = rng.random((coarse, coarse))
    field = zoom(noise, (h / coarse, w / coarse), order=3, grid_mode=True, mode="nearest")
    span = field.max() - field.min()
    field = (field - field.min()) / (span if span > 0 else 1.0)
    return lo + (hi - lo) * field


def _apply_attributes(albedo, bits, size):
    h = w = size
    out = albedo.copy()
    if bits[0] >= 0.5:  # glasses: dark band across the eye region
        r0, r1 = int(0.28 * h), int(0.42 * h)
        out[r0:r1, :, :] *= 0.35
    if len(bits) > 1 and bits[1] >= 0.5:  # smile: bright arc near the mouth
        r0, r1 = int(0.64 * h), int(0.78 * h)
        c0, c1 = int(0.28 * w), int(0.72 * w)
        out[r0:r1, c0:c1, :] = np.clip(out[r0:r1, c0:c1, :] + 0.35, 0.0, 0.75)
    return out


def generate_synthetic(spec: SyntheticSpec):
    """Build a fully seeded synthetic manifest with ground-truth factors.

    Each image is warp(shading * albedo, grid): albedo is an identity-keyed
    smooth color pattern modified per attribute, shading a smooth positive
    field, and the grid integrates smooth positive increments scaled by
    deformation_magnitude. Attribute labels are balanced per attribute.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    n_attr = len(spec.attributes)

    id_albedos = [
        np.stack([_smooth_field(rng, size, size, 0.25, 0.75) for _ in range(3)], axis=-1)
        for _ in range(spec.n_identities)
    ]

    # Exactly half positive per attribute (up to rounding), seeded shuffle.
    labels = np.zeros((spec.n_images, n_attr), dtype=np.float32)
    for a in range(n_attr):
        bits = np.zeros(spec.n_images, dtype=np.float32)
        bits[: spec.n_images // 2] = 1.0
        rng.shuffle(bits)
        labels[:, a] = bits

    n_test = int(round(spec.test_fraction * spec.n_images))
    split_flags = np.array(["train"] * spec.n_images)
    if n_test:
        split_flags[rng.choice(spec.n_images, size=n_test, replace=False)] = "test"

    records = []
    for i in range(spec.n_images):
        identity = i % spec.n_identities
        albedo = _apply_attributes(id_albedos[identity], labels[i], size)
        shading = _smooth_field(rng, size, size, 0.7, 1.3)
        texture = (shading[:, :, None] * albedo).astype(np.float32)

        inc = np.stack(
            [
                1.0 + spec.deformation_magnitude * _smooth_field(rng, size, size, 0.0, 1.0),
                1.0 + spec.deformation_magnitude * _smooth_field(rng, size, size, 0.0, 1.0),
            ]
        ).astype(np.float32)
        grid = warp.integrate_deformation(torch.from_numpy(inc).unsqueeze(0))
        tex_t = torch.from_numpy(texture).permute(2, 0, 1).unsqueeze(0)
        image = warp.warp_image(tex_t, grid)[0].permute(1, 2, 0).numpy()

        records.append(
            SyntheticRecord(
                image_path=f"synthetic_{i:05d}.png",
                identity=identity,
                split=str(split_flags[i]),
                labels=labels[i],
                image=image.astype(np.float32),
                true_texture=texture,
                true_grid=grid[0].numpy(),
            )
        )
    return Manifest(records, list(spec.attributes), MULTI_BINARY)


def write_synthetic(manifest, out_dir):
    """Write PNGs, manifest CSV and a float ground-truth archive."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth = {}
    for rec in manifest.records:
        path = out_dir / Path(rec.image_path).name
        img = np.clip(rec.image, 0.0, 1.0)
        Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)
        rec.image_path = path.name
        rec.base_dir = str(out_dir)
        key = Path(path).stem
        truth[f"{key}_image"] = rec.image
        truth[f"{key}_texture"] = rec.true_texture
        truth[f"{key}_grid"] = rec.true_grid
    np.savez_compressed(out_dir / "ground_truth.npz", **truth)
    manifest.save_csv(out_dir / "manifest.csv")
    return out_dir / "manifest.csv"


def load_ground_truth(manifest_csv):
    """Reattach float ground truth saved next to a synthetic manifest."""
    manifest = load_manifest_csv(manifest_csv)
    archive = np.load(Path(manifest_csv).parent / "ground_truth.npz")
    records = []
    for rec in manifest.records:
        key = Path(rec.image_path).stem
        records.append(
            SyntheticRecord(
                image_path=rec.image_path,
                identity=rec.identity,
                split=rec.split,
                labels=rec.labels,
                image=archive[f"{key}_image"],
                true_texture=archive[f"{key}_texture"],
                true_grid=archive[f"{key}_grid"],
            )
        )
    return Manifest(records, manifest.vocabulary, manifest.label_mode)


def batch_iterator(manifest, batch_size, seed, flip_prob=0.5):
    """Yield one epoch of (images, labels) batches.

    Order is a seeded permutation; each image is independently mirrored
    with probability flip_prob; pixel values are in [0, 1]; the final
    short batch is emitted. The sequence is a pure function of
    (manifest, batch_size, seed, flip_prob).
    """
    if len(manifest) == 0:
        raise ManifestError("cannot iterate an empty manifest")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest))
    flips = rng.random(len(manifest)) < flip_prob
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        imgs, labs = [], []
        for j in idx:
            arr = manifest.records[j].load_image()
            if flips[j]:
                arr = arr[:, ::-1, :].copy()
            imgs.append(arr)
            labs.append(manifest.records[j].labels)
        images = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).float()
        labels = torch.from_numpy(np.stack(labs)).float()
        yield images, labels
