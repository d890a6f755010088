"""Dataset ingestion, manifests, patient-disjoint splitting, augmentation,
and patch extraction.

Images are 8-bit RGB numpy arrays, layout (height, width, 3), moved to and
from disk as PNG. Every randomized stage draws from a generator forked off
the run seed with a stage label, so each stage is independently
reproducible and byte-identical under the same seed.

Two dataset layouts are understood by `ingest`:

  - ``breakhis``: any directory tree of PNGs whose *filenames* follow the
    pattern ``SOB_<B|M>_<SUB>-<patient>-<magnification>-<seq>.png``, e.g.
    ``SOB_B_TA-14-4659-40-001.png``. Class (benign/malignant) comes from
    the B|M letter, the subclass from the code after it, the patient id
    and magnification from the following dash-separated fields.
  - ``challenge2015``: one directory per class (normal/benign/insitu/
    invasive) of PNGs; records carry no patient id and no magnification.

Derived images (augmentation outputs, patches) are written as
``<parent-stem>__aNNN.png`` / ``<parent-stem>__pNNN.png``; evaluation
recovers the parent image of a patch by stripping that suffix.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .rng import fork_rng

MAGNIFICATIONS = ("40", "100", "200", "400", "none")
BENIGN_SUBCLASSES = ("A", "F", "TA", "PT")
MALIGNANT_SUBCLASSES = ("DC", "LC", "MC", "PC")
DATASET_VOCABULARIES = {
    "breakhis": ("benign", "malignant"),
    "challenge2015": ("normal", "benign", "insitu", "invasive"),
}
MANIFEST_HEADER = ("path", "patient_id", "magnification", "class", "subclass", "split")

_BREAKHIS_NAME = re.compile(
    r"SOB_([BM])_([A-Z]{1,2})[-_](.+)-(\d+)-(\d+)\.png$", re.IGNORECASE
)
_DERIVED_SUFFIX = re.compile(r"__[ap]\d+$")


# ---------------------------------------------------------------------------
# records and manifests
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    path: str
    patient_id: str = ""
    magnification: str = "none"
    class_label: str = ""
    subclass_label: str = ""
    split: str = "unassigned"

    def __post_init__(self):
        if self.magnification not in MAGNIFICATIONS:
            raise DataError(
                f"{self.path}: magnification {self.magnification!r} is not one of {MAGNIFICATIONS}"
            )
        if self.split not in ("train", "test", "unassigned"):
            raise DataError(f"{self.path}: split {self.split!r} is invalid")
        if self.subclass_label:
            expected = (
                "benign"
                if self.subclass_label in BENIGN_SUBCLASSES
                else "malignant"
                if self.subclass_label in MALIGNANT_SUBCLASSES
                else None
            )
            if expected is None:
                raise DataError(
                    f"{self.path}: unknown subclass {self.subclass_label!r}"
                )
            if self.class_label != expected:
                raise DataError(
                    f"{self.path}: subclass {self.subclass_label} implies class "
                    f"{expected}, but record says {self.class_label}"
                )


def parent_image_id(sample_path: str) -> str:
    """Parent image stem for a patch/augmented file; the stem itself otherwise."""
    stem = Path(sample_path).stem
    return _DERIVED_SUFFIX.sub("", stem)


@dataclass
class Manifest:
    dataset_id: str
    records: List[SampleRecord] = field(default_factory=list)
    vocabulary: Tuple[str, ...] = ()
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.vocabulary and self.dataset_id in DATASET_VOCABULARIES:
            self.vocabulary = DATASET_VOCABULARIES[self.dataset_id]
        self.vocabulary = tuple(self.vocabulary)
        missing = {r.class_label for r in self.records} - set(self.vocabulary)
        if missing:
            raise DataError(
                f"labels {sorted(missing)} present in records but absent from the "
                f"vocabulary {self.vocabulary}"
            )
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})[:3]
            raise DataError(f"duplicate image paths in manifest, e.g. {dupes}")

    def counts(self) -> Dict[Tuple[str, str], int]:
        """(class, magnification) -> record count."""
        out: Dict[Tuple[str, str], int] = {}
        for r in self.records:
            key = (r.class_label, r.magnification)
            out[key] = out.get(key, 0) + 1
        return out

    def subset(self, split: Optional[str] = None, magnification: Optional[str] = None) -> List[SampleRecord]:
        recs = self.records
        if split is not None:
            recs = [r for r in recs if r.split == split]
        if magnification is not None:
            recs = [r for r in recs if r.magnification == magnification]
        return recs

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        """Write the CSV (schema above) and a `.meta.json` sidecar, atomically."""
        path = Path(path)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in self.records:
            writer.writerow(
                (r.path, r.patient_id, r.magnification, r.class_label, r.subclass_label, r.split)
            )
        atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
        sidecar = {
            "dataset_id": self.dataset_id,
            "vocabulary": list(self.vocabulary),
            **self.metadata,
        }
        atomic_write_bytes(
            path.with_suffix(path.suffix + ".meta.json"),
            (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode("utf-8"),
        )

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest {path} does not exist")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != MANIFEST_HEADER:
                raise DataError(
                    f"{path}: manifest header {header} does not match {MANIFEST_HEADER}"
                )
            records = [
                SampleRecord(row[0], row[1], row[2], row[3], row[4], row[5])
                for row in reader
                if row
            ]
        sidecar_path = path.with_suffix(path.suffix + ".meta.json")
        dataset_id, vocabulary, metadata = "", (), {}
        if sidecar_path.exists():
            with open(sidecar_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            dataset_id = meta.pop("dataset_id", "")
            vocabulary = tuple(meta.pop("vocabulary", ()))
            metadata = meta
        if not vocabulary:
            vocabulary = tuple(sorted({r.class_label for r in records}))
        return cls(dataset_id, records, vocabulary, metadata)


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory plus rename, so readers
    never observe a truncated file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode to an 8-bit RGB (H, W, 3) array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image {path} does not exist")
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}")


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"save_image expects (H, W, 3) uint8, got {image.dtype} {image.shape}")
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def ingest(root_dir, dataset_id: str) -> Manifest:
    """Walk `root_dir` and build a manifest; see module docstring for layouts.

    Unparseable files become warnings in the manifest metadata, not errors;
    an empty tree is an error.
    """
    if dataset_id not in DATASET_VOCABULARIES:
        raise ConfigError(
            f"unknown dataset id {dataset_id!r}; expected one of {sorted(DATASET_VOCABULARIES)}"
        )
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    paths = sorted(p for p in root.rglob("*.png") if p.is_file())
    records: List[SampleRecord] = []
    problems: List[str] = []
    for p in paths:
        rel = p.relative_to(root).as_posix()
        if dataset_id == "breakhis":
            m = _BREAKHIS_NAME.search(p.name)
            if not m:
                problems.append(f"{rel}: filename does not match the naming pattern")
                continue
            letter, sub, patient, mag, _seq = m.groups()
            sub = sub.upper()
            cls = "benign" if letter.upper() == "B" else "malignant"
            if mag not in MAGNIFICATIONS[:-1]:
                problems.append(f"{rel}: magnification {mag} is not 40/100/200/400")
                continue
            try:
                records.append(SampleRecord(str(p), patient, mag, cls, sub))
            except DataError as exc:
                problems.append(str(exc))
        else:
            cls = p.relative_to(root).parts[0].lower()
            if cls not in DATASET_VOCABULARIES[dataset_id]:
                problems.append(f"{rel}: directory {cls!r} is not a known class")
                continue
            records.append(SampleRecord(str(p), "", "none", cls))
    if not records:
        raise DataError(f"no usable images found under {root}")
    for cls in DATASET_VOCABULARIES[dataset_id]:
        if not any(r.class_label == cls for r in records):
            problems.append(f"class {cls!r}: zero records")
    manifest = Manifest(dataset_id, records, metadata={"warnings": problems})
    if problems:
        warnings.warn(f"ingest: {len(problems)} problem(s); see manifest metadata")
    return manifest


# ---------------------------------------------------------------------------
# patient-disjoint splitting
# ---------------------------------------------------------------------------


def split_by_patient(manifest: Manifest, train_fraction: float = 0.7, seed: int = 0) -> Manifest:
    """Assign splits patient-by-patient in seeded random order.

    Patients are added to train while the accumulated sample count is below
    train_fraction x total, so the first patient to reach the threshold is
    included and the overshoot is minimal for that order. Records without a
    patient id are treated as single-sample patients.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if not manifest.records:
        raise DataError("cannot split an empty manifest")

    groups: Dict[str, List[int]] = {}
    for idx, rec in enumerate(manifest.records):
        key = rec.patient_id if rec.patient_id else f"\x00anon{idx}"
        groups.setdefault(key, []).append(idx)

    keys = sorted(groups)
    rng = fork_rng(seed, "split")
    order = [keys[i] for i in rng.permutation(len(keys))]

    total = len(manifest.records)
    target = train_fraction * total
    train_keys = set()
    accumulated = 0
    for key in order:
        if accumulated >= target:
            break
        train_keys.add(key)
        accumulated += len(groups[key])

    if len(keys) == 1:
        warnings.warn(
            "split_by_patient: a single patient supplies every record; the whole "
            "set goes to train and the test split is empty"
        )

    new_records = []
    for idx, rec in enumerate(manifest.records):
        key = rec.patient_id if rec.patient_id else f"\x00anon{idx}"
        new_records.append(replace(rec, split="train" if key in train_keys else "test"))
    metadata = dict(manifest.metadata)
    metadata.update({"split_seed": int(seed), "train_fraction": train_fraction})
    return Manifest(manifest.dataset_id, new_records, manifest.vocabulary, metadata)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 40.0
    width_shift_frac: float = 0.2
    height_shift_frac: float = 0.2
    shear_frac: float = 0.2
    zoom_frac: float = 0.2
    horizontal_flip: bool = True
    vertical_flip: bool = True
    outputs_per_input: int = 21
    seed: int = 0

    def __post_init__(self):
        for name in ("width_shift_frac", "height_shift_frac", "shear_frac", "zoom_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.outputs_per_input < 1:
            raise ConfigError("outputs_per_input must be >= 1")
        if self.rotation_max_deg < 0:
            raise ConfigError("rotation_max_deg must be >= 0")


def _bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) float image at fractional coordinates, clamping to
    the nearest edge pixel outside the frame."""
    h, w = image.shape[:2]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    wy = wy[..., None]
    wx = wx[..., None]
    top = image[y0c, x0c] * (1 - wx) + image[y0c, x1c] * wx
    bot = image[y1c, x0c] * (1 - wx) + image[y1c, x1c] * wx
    return top * (1 - wy) + bot * wy


def _affine_transform(image: np.ndarray, matrix: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Apply dst = M @ (src - c) + c + shift by inverse-mapping each output
    pixel back into the source and sampling bilinearly (edge fill)."""
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    inv = np.linalg.inv(matrix)
    dy = ys - cy - shift[0]
    dx = xs - cx - shift[1]
    src_y = inv[0, 0] * dy + inv[0, 1] * dx + cy
    src_x = inv[1, 0] * dy + inv[1, 1] * dx + cx
    out = _bilinear_sample(image.astype(np.float64), src_y, src_x)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _draw_transform(cfg: AugmentConfig, rng: np.random.Generator):
    """Draw one transform's parameters in a fixed order."""
    theta = np.deg2rad(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    wshift = rng.uniform(-cfg.width_shift_frac, cfg.width_shift_frac)
    hshift = rng.uniform(-cfg.height_shift_frac, cfg.height_shift_frac)
    shear = rng.uniform(-cfg.shear_frac, cfg.shear_frac)
    zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac)
    flip_h = cfg.horizontal_flip and rng.random() < 0.5
    flip_v = cfg.vertical_flip and rng.random() < 0.5
    return theta, wshift, hshift, shear, zoom, flip_h, flip_v


def augment(image: np.ndarray, config: AugmentConfig,
            rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Produce `outputs_per_input` images: the untouched original first,
    then randomized affine transforms (rotation, shear, zoom, shift,
    composed in that order about the image center) with optional flips.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"augment expects an (H, W, 3) image, got shape {image.shape}")
    if rng is None:
        rng = fork_rng(config.seed, "augment")
    h, w = image.shape[:2]
    outputs = [image.copy()]
    for _ in range(config.outputs_per_input - 1):
        theta, wshift, hshift, shear, zoom, flip_h, flip_v = _draw_transform(config, rng)
        # coordinates are (y, x); rotation -> shear -> zoom, then shift
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        sh = np.array([[1.0, shear], [0.0, 1.0]])
        zm = np.array([[zoom, 0.0], [0.0, zoom]])
        matrix = zm @ sh @ rot
        shift = np.array([hshift * h, wshift * w])
        out = _affine_transform(image, matrix, shift)
        if flip_h:
            out = np.flip(out, axis=1)
        if flip_v:
            out = np.flip(out, axis=0)
        outputs.append(np.ascontiguousarray(out))
    return outputs


# ---------------------------------------------------------------------------
# patches and resizing
# ---------------------------------------------------------------------------


def extract_center_patch(image: np.ndarray, size: int = 128) -> np.ndarray:
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h < size or w < size:
        raise DataError(f"image {w}x{h} is smaller than the {size}x{size} patch")
    x0 = (w - size) // 2
    y0 = (h - size) // 2
    return np.ascontiguousarray(image[y0 : y0 + size, x0 : x0 + size])


def extract_random_patches(image: np.ndarray, count: int = 200, size: int = 128,
                           seed: int = 0,
                           rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Uniformly placed square crops; duplicates permitted."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h < size or w < size:
        raise DataError(f"image {w}x{h} is smaller than the {size}x{size} patch")
    if count < 1:
        raise ConfigError("patch count must be >= 1")
    if rng is None:
        rng = fork_rng(seed, "patches")
    patches = []
    for _ in range(count):
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
        patches.append(np.ascontiguousarray(image[y0 : y0 + size, x0 : x0 + size]))
    return patches


def resize(image: np.ndarray, size: int = 128) -> np.ndarray:
    """Bilinear resample to size x size with half-pixel-center alignment:
    src = (dst + 0.5) * scale - 0.5, clamped at the edges."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h == size and w == size:
        return image.copy()
    sy = h / size
    sx = w / size
    ys = (np.arange(size, dtype=np.float64) + 0.5) * sy - 0.5
    xs = (np.arange(size, dtype=np.float64) + 0.5) * sx - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = _bilinear_sample(image.astype(np.float64), grid_y, grid_x)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# arrays for the model
# ---------------------------------------------------------------------------


def channel_stats(images: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of [0,1]-scaled pixels over a set of images."""
    if not len(images):
        raise DataError("channel_stats needs at least one image")
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    n = 0
    for img in images:
        x = np.asarray(img, dtype=np.float64) / 255.0
        acc += x.sum(axis=(0, 1))
        acc2 += (x ** 2).sum(axis=(0, 1))
        n += x.shape[0] * x.shape[1]
    mean = acc / n
    var = np.maximum(acc2 / n - mean ** 2, 0.0)
    return mean, np.sqrt(var)


def normalize_images(images: Sequence[np.ndarray], mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Stack (H, W, 3) uint8 images into a (N, 3, H, W) float32 batch,
    scaled to [0,1] then standardized per channel."""
    std_safe = np.where(np.asarray(std) > 1e-8, std, 1.0)
    batch = np.stack([np.asarray(img, dtype=np.float32) / 255.0 for img in images])
    batch = (batch - np.asarray(mean, dtype=np.float32)) / np.asarray(std_safe, dtype=np.float32)
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def records_to_arrays(records: Sequence[SampleRecord], vocabulary: Sequence[str],
                      mean: np.ndarray, std: np.ndarray):
    """Load every record's image and return (x, y, patients, paths): a
    normalized (N, 3, H, W) float32 batch, integer labels per the
    vocabulary order, and the records' patient ids and paths."""
    if not records:
        raise DataError("no records to load")
    label_index = {c: i for i, c in enumerate(vocabulary)}
    images, labels = [], []
    for rec in records:
        if rec.class_label not in label_index:
            raise DataError(
                f"{rec.path}: label {rec.class_label!r} not in vocabulary {tuple(vocabulary)}"
            )
        images.append(load_image(rec.path))
        labels.append(label_index[rec.class_label])
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DataError(f"images have mixed shapes {sorted(shapes)}; resize or patch first")
    x = normalize_images(images, mean, std)
    y = np.asarray(labels, dtype=np.int64)
    return x, y, [r.patient_id for r in records], [r.path for r in records]
