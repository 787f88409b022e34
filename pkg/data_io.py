import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import (
    ConsistencyError,
    DataError,
    FormatError,
    MissingFileError,
    ParameterError,
    PartitionSizeError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim < 2 or len(inputs) != len(labels):
            raise DataError(
                f"{self.name}: {len(inputs)} entrées pour {len(labels)} étiquettes"
            )
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise DataError(f"{self.name}: entrées hors de [0,1]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], name or self.name)

    def head(self, count):
        return self.subset(np.arange(min(count, len(self))))

    def reshape(self, shape):
        shape = tuple(int(d) for d in shape)
        return Dataset(self.inputs.reshape((len(self), *shape)), self.labels, self.name)


@dataclass(frozen=True)
class PartitionPlan:
    part_count: int
    part_size: int
    validation_size: int = 0
    seed: int = 0

    def required(self):
        return self.part_count * self.part_size + self.validation_size


def _open(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Fichier IDX introuvable : {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic):
    with _open(path) as f:
        payload = f.read()
    if len(payload) < 8:
        raise FormatError(f"{path}: en-tête IDX tronqué")
    magic = struct.unpack(">I", payload[:4])[0]
    if magic != expected_magic:
        raise FormatError(
            f"{path}: nombre magique 0x{magic:08x}, attendu 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise FormatError(f"{path}: dimensions tronquées")
    dims = struct.unpack(f">{ndim}I", payload[4:header])
    expected = int(np.prod(dims))
    body = payload[header:]
    if len(body) < expected:
        raise FormatError(f"{path}: {len(body)} octets, {expected} attendus")
    return np.frombuffer(body[:expected], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images mais {labels.shape[0]} étiquettes"
        )
    logger.info("📂 %d images %s chargées depuis %s", len(images), images.shape[1:], images_path)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), Path(images_path).stem)


def write_idx(ds, images_path, labels_path):
    pixels = np.rint(ds.inputs * 255.0).astype(np.uint8)
    if pixels.ndim != 3:
        pixels = pixels.reshape(len(ds), 1, -1)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def partition(ds, plan):
    if plan.part_count < 1 or plan.part_size < 1 or plan.validation_size < 0:
        raise ParameterError(f"plan de partition invalide : {plan}")
    if plan.required() > len(ds):
        raise PartitionSizeError(
            f"le plan demande {plan.required()} exemples, {len(ds)} disponibles"
        )
    order = np.random.default_rng(plan.seed).permutation(len(ds))
    parts = []
    for i in range(plan.part_count):
        chunk = order[i * plan.part_size:(i + 1) * plan.part_size]
        parts.append(ds.subset(chunk, f"{ds.name}-part{i}"))
    start = plan.part_count * plan.part_size
    validation = ds.subset(order[start:start + plan.validation_size], f"{ds.name}-validation")
    return parts, validation


def synth_blobs(class_count, per_class, dim, spread, seed):
    if class_count < 2 or dim < 2:
        raise ParameterError("synth_blobs demande class_count >= 2 et dim >= 2")
    rng = np.random.default_rng(seed)
    anchors = rng.uniform(0.2, 0.8, size=(class_count, dim))
    # première coordonnée régulièrement espacée : ancres toujours distinctes
    anchors[:, 0] = np.linspace(0.2, 0.8, class_count)
    labels = np.repeat(np.arange(class_count), per_class)
    points = anchors[labels]
    if spread > 0:
        points = np.clip(points + spread * rng.standard_normal(points.shape), 0.0, 1.0)
    return Dataset(points, labels, "blobs")
