"""In-memory labeled datasets, directory ingestion and the synthetic desk benchmark.

A dataset directory holds one ``.npz`` file per split::

    <root>/train.npz   x: float32 [n, ...] in [0, 1]   y: int [n]   coarse: int [n] (optional)
    <root>/test.npz    same keys
    <root>/classes.json  (optional) {"fine": [...names...], "coarse": [...names...]}

Labels may be arbitrary integers on disk; they are remapped to dense IDs
``0..C-1`` (sorted order) at load time and the original values are kept in
``LabeledDataset.label_names``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "CLASSIL_DATA"


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    fine: np.ndarray
    coarse: np.ndarray | None = None
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.fine = np.asarray(self.fine, dtype=np.int64)
        if len(self.inputs) != len(self.fine):
            raise DatasetError(f"{len(self.inputs)} inputs but {len(self.fine)} labels")
        if self.coarse is not None:
            self.coarse = np.asarray(self.coarse, dtype=np.int64)
            if len(self.coarse) != len(self.fine):
                raise DatasetError("coarse labels do not align with fine labels")
            superclass_map(self.fine, self.coarse)  # validates the mapping

    def __len__(self) -> int:
        return len(self.fine)

    @property
    def num_classes(self) -> int:
        return int(self.fine.max()) + 1 if len(self.fine) else 0

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.fine, np.asarray(list(classes), dtype=np.int64)))

    def per_class_indices(self, classes) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.fine == c) for c in classes}

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        coarse = None if self.coarse is None else self.coarse[idx]
        return LabeledDataset(self.inputs[idx], self.fine[idx], coarse, list(self.label_names))

    def superclasses(self) -> np.ndarray:
        """Array mapping each fine class ID to its superclass ID."""
        if self.coarse is None:
            raise DatasetError("dataset has no coarse labels")
        return superclass_map(self.fine, self.coarse)


def superclass_map(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    n_classes = int(fine.max()) + 1
    mapping = np.full(n_classes, -1, dtype=np.int64)
    for f, c in zip(fine, coarse):
        if mapping[f] == -1:
            mapping[f] = c
        elif mapping[f] != c:
            raise DatasetError(f"fine class {f} maps to superclasses {mapping[f]} and {c}")
    return mapping


@dataclass
class DatasetSplits:
    name: str
    train: LabeledDataset
    test: LabeledDataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def has_coarse(self) -> bool:
        return self.train.coarse is not None


def resolve_root(path: str | os.PathLike | None, name: str) -> Path:
    if path:
        return Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DatasetError(f"no path given for dataset {name!r} and ${DATA_ROOT_ENV} is unset")
    return Path(root) / name


def load_directory(root: str | os.PathLike, name: str = "") -> DatasetSplits:
    root = Path(root)
    splits = {}
    for split in ("train", "test"):
        path = root / f"{split}.npz"
        if not path.exists():
            raise DatasetError(f"missing split file: {path}")
        with np.load(path) as z:
            x = z["x"]
            if x.dtype == np.uint8:
                x = x.astype(np.float32) / 255.0
            splits[split] = (x.astype(np.float32), z["y"], z["coarse"] if "coarse" in z else None)
    raw_fine = np.unique(np.concatenate([splits["train"][1], splits["test"][1]]))
    dense = {int(v): i for i, v in enumerate(raw_fine)}
    names = [str(v) for v in raw_fine]
    sidecar = root / "classes.json"
    if sidecar.exists():
        fine_names = json.loads(sidecar.read_text()).get("fine")
        if fine_names:
            names = [fine_names[int(v)] for v in raw_fine]
    out = {}
    for split, (x, y, coarse) in splits.items():
        fine = np.array([dense[int(v)] for v in y], dtype=np.int64)
        out[split] = LabeledDataset(x, fine, coarse, names)
    return DatasetSplits(name or root.name, out["train"], out["test"])


def save_directory(splits: DatasetSplits, root: str | os.PathLike) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        ds = getattr(splits, split)
        arrays = {"x": ds.inputs, "y": ds.fine}
        if ds.coarse is not None:
            arrays["coarse"] = ds.coarse
        np.savez_compressed(root / f"{split}.npz", **arrays)
    if splits.train.label_names:
        (root / "classes.json").write_text(json.dumps({"fine": splits.train.label_names}))
    return root


def load_cifar100_python(root: str | os.PathLike) -> DatasetSplits:
    """Read the official ``cifar-100-python`` pickle release (fine + coarse labels)."""
    import pickle

    root = Path(root)
    if (root / "cifar-100-python").is_dir():
        root = root / "cifar-100-python"
    out = {}
    for split in ("train", "test"):
        with open(root / split, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        x = np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        out[split] = (x, np.asarray(d["fine_labels"]), np.asarray(d["coarse_labels"]))
    names = [str(i) for i in range(100)]
    meta = root / "meta"
    if meta.exists():
        with open(meta, "rb") as fh:
            names = pickle.load(fh, encoding="latin1")["fine_label_names"]
    return DatasetSplits(
        "cifar100",
        LabeledDataset(*out["train"], names),
        LabeledDataset(*out["test"], names),
    )


def load_dataset(name: str, path: str | None = None) -> DatasetSplits:
    if name == "toy":
        return make_toy_benchmark()
    root = resolve_root(path, name)
    if name == "cifar100" and not (root / "train.npz").exists():
        return load_cifar100_python(root)
    return load_directory(root, name)


def make_toy_benchmark(
    num_superclasses: int = 5,
    classes_per_superclass: int = 4,
    dim: int = 32,
    train_per_class: int = 100,
    test_per_class: int = 50,
    superclass_spread: float = 1.5,
    class_spread: float = 0.75,
    noise: float = 0.55,
    latent_dim: int | None = None,
    seed: int = 0,
) -> DatasetSplits:
    """Gaussian class clusters nested inside superclass clusters.

    Class centres are drawn around their superclass centre, so classes of
    the same superclass are closer to each other than to the rest; the
    secondary-logit metrics therefore have signal on this data.

    With ``latent_dim`` set, all centres live in one random ``latent_dim``
    subspace while the noise fills every input dimension, so features that
    separate the first classes also carry over to later ones.
    """
    rng = np.random.default_rng(seed)
    n_classes = num_superclasses * classes_per_superclass
    k = dim if latent_dim is None else latent_dim
    super_centres = rng.normal(0.0, superclass_spread, (num_superclasses, k))
    coarse_of = np.repeat(np.arange(num_superclasses), classes_per_superclass)
    centres = super_centres[coarse_of] + rng.normal(0.0, class_spread, (n_classes, k))
    if latent_dim is not None:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, k)))
        centres = centres @ basis.T

    def draw(per_class):
        y = np.repeat(np.arange(n_classes), per_class)
        x = centres[y] + rng.normal(0.0, noise, (len(y), dim))
        return LabeledDataset(x.astype(np.float32), y, coarse_of[y], [f"c{i}" for i in range(n_classes)])

    return DatasetSplits("toy", draw(train_per_class), draw(test_per_class))
