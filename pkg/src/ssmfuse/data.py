"""Synthetic multimodal datasets and tensor/dataset file formats.

Generation model: each sample draws a class-conditioned latent z plus a
per-position latent stream shared across modalities; modality m observes

    X_m[t] = rho * f_m(z + 0.5 * zeta_t) + (1 - rho) * noise_scale * eta_mt

with f_m a fixed random affine map per modality (a linear mix plus a
per-modality offset, so the modalities start with a genuine distribution
gap the model has to close) and eta modality-private Gaussian noise. rho
controls how alignable the modalities are, and the label is linearly
decodable from the shared latent but never from the private noise.
Everything is a pure function of the config (seed included).

Tensor files use the MAT1 layout: magic ``MAT1``, u8 dtype code
(0 = f32, 1 = f64), u8 rank, rank little-endian u32 dims, then the raw
little-endian payload. A dataset directory holds one MAT1 file per sample
per modality plus a ``manifest.json`` naming files, labels, and splits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"MAT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

LATENT_DIM = 8
SPLIT_FRACTIONS = (0.7, 0.15)  # train, val; the remainder is test


class Mat1Error(ValueError):
    """Malformed MAT1 file; ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_mat1(path, tensor) -> None:
    arr = np.ascontiguousarray(tensor.data if isinstance(tensor, Tensor) else tensor)
    if arr.dtype not in _CODES_BY_KIND:
        raise Mat1Error(f"unsupported dtype {arr.dtype}", 4)
    if arr.ndim > 255:
        raise Mat1Error(f"rank {arr.ndim} exceeds format limit", 5)
    code = _CODES_BY_KIND[arr.dtype]
    header = MAGIC + bytes([code, arr.ndim])
    header += struct.pack("<" + "I" * arr.ndim, *arr.shape)
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_mat1(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise Mat1Error(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 6:
        raise Mat1Error("truncated header", len(raw))
    code, rank = raw[4], raw[5]
    if code not in _DTYPE_CODES:
        raise Mat1Error(f"unknown dtype code {code}", 4)
    dims_end = 6 + 4 * rank
    if len(raw) < dims_end:
        raise Mat1Error("truncated dimension list", len(raw))
    dims = struct.unpack("<" + "I" * rank, raw[6:dims_end])
    dtype = _DTYPE_CODES[code]
    expected = dims_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise Mat1Error(
            f"payload length mismatch: expected {expected} bytes, found {len(raw)}",
            min(len(raw), expected))
    arr = np.frombuffer(raw[dims_end:], dtype=dtype).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    d_in: int
    seq_len: int

    def __post_init__(self):
        if self.d_in < 1 or self.seq_len < 1:
            raise ValueError(f"modality {self.name!r}: dims and lengths must be >= 1")


@dataclass
class SynthConfig:
    modalities: list[ModalitySpec]
    num_classes: int = 2
    samples_per_class: int = 143  # sized so the train split holds 100 per class
    rho: float = 0.7
    label_signal: float = 2.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m)
                           for m in self.modalities]
        if not self.modalities:
            raise ValueError("need at least one modality")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes and samples_per_class must be >= 1")


@dataclass
class MultimodalSample:
    features: dict[str, np.ndarray]
    label: int


@dataclass
class Dataset:
    modalities: list[ModalitySpec]
    num_classes: int
    samples: list[MultimodalSample]
    splits: list[str] = field(default_factory=list)

    def of_split(self, name: str) -> list[MultimodalSample]:
        return [s for s, tag in zip(self.samples, self.splits) if tag == name]


def _split_sizes(n: int) -> dict[str, int]:
    train = int(SPLIT_FRACTIONS[0] * n)
    val = int(SPLIT_FRACTIONS[1] * n)
    return {"train": train, "val": val, "test": n - train - val}


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministically build the dataset described by ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    k = LATENT_DIM
    t_max = max(m.seq_len for m in cfg.modalities)

    class_dirs = rng.normal(size=(cfg.num_classes, k))
    class_dirs /= np.linalg.norm(class_dirs, axis=1, keepdims=True)
    mixers = {m.name: rng.normal(size=(k, m.d_in)) / np.sqrt(k) for m in cfg.modalities}
    offsets = {m.name: 0.75 * rng.normal(size=m.d_in) for m in cfg.modalities}

    samples: list[MultimodalSample] = []
    splits: list[str] = []
    sizes = _split_sizes(cfg.samples_per_class)
    for label in range(cfg.num_classes):
        for split, count in sizes.items():
            for _ in range(count):
                z = cfg.label_signal * class_dirs[label] + rng.normal(size=k)
                zeta = rng.normal(size=(t_max, k))
                features = {}
                for m in cfg.modalities:
                    shared = (z[None, :] + 0.5 * zeta[:m.seq_len]) @ mixers[m.name]
                    shared = shared + offsets[m.name]
                    eta = rng.normal(size=(m.seq_len, m.d_in))
                    features[m.name] = (cfg.rho * shared
                                        + (1.0 - cfg.rho) * cfg.noise_scale * eta)
                samples.append(MultimodalSample(features, label))
                splits.append(split)
    return Dataset(list(cfg.modalities), cfg.num_classes, samples, splits)


def save_dataset(dataset: Dataset, out_dir, force: bool = False) -> Path:
    """Write MAT1 feature files plus a manifest; refuses a dirty directory."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use force)")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "ssmfuse-dataset-v1",
        "modalities": [{"name": m.name, "d_in": m.d_in, "seq_len": m.seq_len}
                       for m in dataset.modalities],
        "num_classes": dataset.num_classes,
        "samples": [],
    }
    for i, (sample, split) in enumerate(zip(dataset.samples, dataset.splits)):
        sid = f"s{i:05d}"
        files = {}
        for name, arr in sample.features.items():
            fname = f"{sid}.{name}.mat1"
            save_mat1(out / fname, arr)
            files[name] = fname
        manifest["samples"].append(
            {"id": sid, "label": int(sample.label), "split": split, "files": files})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    modalities = [ModalitySpec(**m) for m in manifest["modalities"]]
    samples, splits = [], []
    for entry in manifest["samples"]:
        features = {name: load_mat1(root / fname).data
                    for name, fname in entry["files"].items()}
        samples.append(MultimodalSample(features, int(entry["label"])))
        splits.append(entry["split"])
    return Dataset(modalities, int(manifest["num_classes"]), samples, splits)
