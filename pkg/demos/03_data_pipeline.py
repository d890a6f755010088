"""Data pipeline end to end on a synthetic microscope-image tree:
ingest -> patient-aware split -> augmentation -> patches -> arrays.

Everything lands in a temporary directory that is printed at the end.

Run from the repository root:  python3 demos/03_data_pipeline.py
"""

import tempfile
from pathlib import Path

import numpy as np

from irrcnn import data
from irrcnn.rng import fork_rng


def fake_slide(rng, base):
    """A blotchy 96x96 RGB tile whose brightness depends on the class."""
    img = rng.normal(base, 25.0, size=(96, 96, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def build_tree(root: Path):
    rng = np.random.default_rng(0)
    layout = {"benign": ("B", "A", 0, 70), "malignant": ("M", "DC", 1000, 180)}
    for cls, (code, sub, pid0, base) in layout.items():
        for p in range(3):
            for mag in ("40", "100"):
                for i in range(2):
                    d = root / cls / sub / f"patient{pid0 + p}" / mag
                    d.mkdir(parents=True, exist_ok=True)
                    name = f"SOB_{code}_{sub}-14-{pid0 + p:05d}-{mag}-{i:03d}.png"
                    data.save_image(d / name, fake_slide(rng, base))


def main():
    root = Path(tempfile.mkdtemp(prefix="pipeline-demo-"))
    build_tree(root / "raw")

    manifest = data.ingest(root / "raw", "breakhis")
    print(f"ingested {len(manifest.records)} images, "
          f"classes {manifest.vocabulary}")
    for (label, mag), count in sorted(manifest.counts().items()):
        print(f"  {label:10s} x{mag:>3}: {count}")

    # split keeps every patient wholly on one side
    split = data.split_by_patient(manifest, train_fraction=0.7, seed=1)
    for which in ("train", "test"):
        recs = split.subset(split=which)
        patients = sorted({r.patient_id for r in recs})
        print(f"{which:5s}: {len(recs):2d} images from {patients}")
    split.save(root / "manifest.csv")

    # augmentation: the original plus randomized affine/flip variants
    record = split.subset(split="train")[0]
    image = data.load_image(record.path)
    variants = data.augment(image, data.AugmentConfig(outputs_per_input=5),
                            rng=fork_rng(0, "demo/augment"))
    print(f"augment: 1 image -> {len(variants)} outputs "
          f"(first output is the untouched original: "
          f"{np.array_equal(variants[0], image)})")

    # patches: a deterministic center crop or seeded random placements
    center = data.extract_center_patch(image, 64)
    randoms = data.extract_random_patches(image, count=4, size=64,
                                          rng=fork_rng(0, "demo/patches"))
    print(f"patches: center {center.shape}, {len(randoms)} random crops")

    # arrays ready for the trainer, normalized with train-set statistics
    train_recs = split.subset(split="train")
    images = [data.resize(data.load_image(r.path), 32) for r in train_recs]
    mean, std = data.channel_stats(images)
    xn = data.normalize_images(images, mean, std)
    labels = np.array([split.vocabulary.index(r.class_label) for r in train_recs])
    print(f"arrays: x{xn.shape} labels {np.bincount(labels).tolist()}, "
          f"normalized channel means ~ {xn.mean(axis=(0, 2, 3)).round(6)}")

    print(f"\nartifacts under {root}")


if __name__ == "__main__":
    main()
