"""End-to-end multimodal fusion model and its training loop.

Pipeline per sample: a learned linear encoder lifts each modality's raw
feature sequence to the shared width, a per-modality stack of gated scan
layers models intra-modal context, the resulting representations feed the
alignment penalties, then all sequences are concatenated along time
(carrying per-token modality ids) and run through the fusion stack —
modality-aware expert layers by default, vanilla layers for the ablation.
A mean-pool plus linear head produces logits or a scalar.

The objective is task loss (cross-entropy or mean absolute error) plus the
weighted transport and kernel alignment penalties, each applied exactly
once. Training uses Adam with global-norm gradient clipping, halves the
learning rate when validation loss plateaus, and stops early after a
patience window. Fixed seeds make runs bit-reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import moe as moe_mod
from . import ssm as ssm_mod
from . import tensor as tn
from .align import AlignConfig
from .data import Dataset, ModalitySpec, MultimodalSample, load_mat1, save_mat1
from .tensor import Tensor

CLASSIFICATION = "classification"
REGRESSION = "regression"

# Mid-training alignment can produce slow-converging transport instances;
# the training path buys a larger Sinkhorn budget than the solver default.
SINKHORN_TRAIN_BUDGET = 20_000

METRICS_FIELDS = ("epoch", "split", "loss_task", "loss_ot", "loss_mmd", "accuracy")


class TrainingDiverged(FloatingPointError):
    """Loss went non-finite; message names the first non-finite tensor."""


@dataclass
class ModelConfig:
    modalities: list[ModalitySpec]
    d_model: int = 16
    unimodal_layers: int = 1
    fusion_layers: int = 1
    head: str = CLASSIFICATION
    num_classes: int = 2
    align: AlignConfig = field(default_factory=AlignConfig)
    dropout: float = 0.2
    d_inner: int | None = None
    n_state: int = 16
    d_conv: int = 4
    use_moe: bool = True
    routing: str = moe_mod.DETERMINISTIC
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m)
                           for m in self.modalities]
        if isinstance(self.align, dict):
            self.align = AlignConfig(**self.align)
        if self.unimodal_layers < 1 or self.fusion_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == CLASSIFICATION and self.num_classes < 2:
            raise ValueError("classification needs at least two classes")

    def anchor_name(self) -> str:
        return self.align.anchor if self.align.anchor is not None else self.modalities[-1].name


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    grad_clip: float = 1.0
    early_stop_patience: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


class FusionModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.encoders: dict[str, tuple[Tensor, Tensor]] = {}
        self.unimodal: dict[str, list[ssm_mod.MambaLayer]] = {}
        for spec in cfg.modalities:
            w = ssm_mod._kaiming(rng, (spec.d_in, d), spec.d_in, np.float64)
            b = Tensor(np.zeros(d), requires_grad=True)
            self.encoders[spec.name] = (w, b)
            self.unimodal[spec.name] = [
                ssm_mod.MambaLayer(d, cfg.d_inner, cfg.d_conv, cfg.n_state, rng)
                for _ in range(cfg.unimodal_layers)]
        if cfg.use_moe:
            self.fusion = [moe_mod.MoEMambaLayer(
                d, len(cfg.modalities), cfg.d_inner, cfg.d_conv, cfg.n_state,
                routing=cfg.routing, rng=rng) for _ in range(cfg.fusion_layers)]
        else:
            self.fusion = [ssm_mod.MambaLayer(d, cfg.d_inner, cfg.d_conv, cfg.n_state, rng)
                           for _ in range(cfg.fusion_layers)]
        out_dim = cfg.num_classes if cfg.head == CLASSIFICATION else 1
        self.head_w = ssm_mod._kaiming(rng, (d, out_dim), d, np.float64)
        self.head_b = Tensor(np.zeros(out_dim), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, (w, b) in self.encoders.items():
            out[f"enc.{name}.w"] = w
            out[f"enc.{name}.b"] = b
        for name, stack in self.unimodal.items():
            for i, layer in enumerate(stack):
                for pname, p in layer.params().items():
                    out[f"uni.{name}.{i}.{pname}"] = p
        for i, layer in enumerate(self.fusion):
            for pname, p in layer.params().items():
                out[f"fuse.{i}.{pname}"] = p
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(mask)


def encode(model: FusionModel, sample, train: bool = False,
           rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Per-modality context modeling: encoder projection then the scan stack."""
    feats = sample.features if isinstance(sample, MultimodalSample) else sample
    reps = {}
    drop_rng = rng if train else None
    for spec in model.cfg.modalities:
        if spec.name not in feats:
            raise ValueError(f"sample is missing modality {spec.name!r}")
        raw = feats[spec.name]
        x = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64))
        if x.data.ndim != 2 or x.shape[0] < 1 or x.shape[1] != spec.d_in:
            raise tn.ShapeError(
                f"modality {spec.name!r}: expected (T>=1, {spec.d_in}), got {x.shape}")
        w, b = model.encoders[spec.name]
        h = _dropout(ssm_mod.linear(x, w, b), model.cfg.dropout, drop_rng)
        for layer in model.unimodal[spec.name]:
            h = ssm_mod.mamba_forward(layer, h)
        reps[spec.name] = h
    return reps


def fuse(model: FusionModel, reps: dict[str, Tensor], train: bool = False,
         rng: np.random.Generator | None = None) -> Tensor:
    """Concatenate modalities along time (configured order) and run the fusion stack."""
    order = [m.name for m in model.cfg.modalities]
    widths = {reps[name].shape[1] for name in order}
    if widths != {model.cfg.d_model}:
        raise tn.ShapeError(f"fuse: representation widths {widths} != d_model "
                            f"{model.cfg.d_model}")
    z = tn.concat([reps[name] for name in order], axis=0)
    ids = np.concatenate([np.full(reps[name].shape[0], i, dtype=np.int64)
                          for i, name in enumerate(order)])
    z = _dropout(z, model.cfg.dropout, rng if train else None)
    for layer in model.fusion:
        if model.cfg.use_moe:
            z = moe_mod.moe_mamba_forward(layer, z, ids)
        else:
            z = ssm_mod.mamba_forward(layer, z)
    return z


def predict(model: FusionModel, z: Tensor) -> Tensor:
    """Mean-pool over the fused time axis, then the linear head."""
    if z.shape[0] < 1:
        raise tn.ShapeError("predict: fused sequence is empty")
    pooled = tn.reshape(tn.mean(z, axes=0), (1, model.cfg.d_model))
    out = ssm_mod.linear(pooled, model.head_w, model.head_b)
    if model.cfg.head == CLASSIFICATION:
        return tn.reshape(out, (model.cfg.num_classes,))
    return tn.reshape(out, ())


def forward(model: FusionModel, sample, train: bool = False,
            rng: np.random.Generator | None = None):
    reps = encode(model, sample, train, rng)
    z = fuse(model, reps, train, rng)
    return predict(model, z), reps


def task_loss(pred: Tensor, label, head: str = CLASSIFICATION) -> Tensor:
    if head == CLASSIFICATION:
        if not float(label).is_integer():
            raise ValueError(f"classification head got non-integer label {label!r}")
        idx = int(label)
        if pred.data.ndim != 1:
            raise tn.ShapeError(f"classification expects a logit vector, got {pred.shape}")
        if not 0 <= idx < pred.shape[0]:
            raise ValueError(f"label {idx} outside 0..{pred.shape[0] - 1}")
        return tn.logsumexp(pred, axis=0) - pred[idx]
    if pred.data.ndim != 0:
        raise tn.ShapeError(f"regression expects a scalar prediction, got {pred.shape}")
    return tn.absolute(pred - float(label))


@dataclass
class LossTerms:
    total: Tensor
    task: float
    ot: float
    mmd: float


def loss_terms(model: FusionModel, pred: Tensor, reps: dict[str, Tensor],
               label) -> LossTerms:
    """Task loss plus weighted alignment terms; raw term values kept for logging."""
    acfg = model.cfg.align
    task = task_loss(pred, label, model.cfg.head)
    total = task
    ot_val = 0.0
    mmd_val = 0.0
    if len(reps) >= 2 and (acfg.lambda_ot > 0 or acfg.lambda_mmd > 0):
        anchor = model.cfg.anchor_name()
        if anchor not in reps:
            raise ValueError(f"anchor modality {anchor!r} missing")
        h_anchor = reps[anchor]
        for name, h in reps.items():
            if name == anchor:
                continue
            if acfg.lambda_ot > 0:
                ot = align_mod.ot_loss(h, h_anchor, acfg.blur,
                                       max_iterations=SINKHORN_TRAIN_BUDGET)
                total = total + acfg.lambda_ot * ot
                ot_val += ot.item()
            if acfg.lambda_mmd > 0:
                mmd = align_mod.mmd_loss(h, h_anchor, acfg.mmd_bandwidth_rule,
                                         acfg.mmd_sigma)
                total = total + acfg.lambda_mmd * mmd
                mmd_val += mmd.item()
    return LossTerms(total, task.item(), ot_val, mmd_val)


def total_loss(model: FusionModel, pred: Tensor, reps: dict[str, Tensor], label) -> Tensor:
    return loss_terms(model, pred, reps, label).total


# -- optimization --------------------------------------------------------------

class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad * p.grad
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- evaluation and the training loop -------------------------------------------

def evaluate(model: FusionModel, samples) -> dict:
    """Deterministic pass (dropout off): averaged loss terms plus accuracy."""
    if not samples:
        raise ValueError("evaluate: empty sample list")
    sums = {"loss_task": 0.0, "loss_ot": 0.0, "loss_mmd": 0.0, "loss_total": 0.0}
    correct = 0
    for sample in samples:
        pred, reps = forward(model, sample, train=False)
        terms = loss_terms(model, pred, reps, sample.label)
        sums["loss_task"] += terms.task
        sums["loss_ot"] += terms.ot
        sums["loss_mmd"] += terms.mmd
        sums["loss_total"] += terms.total.item()
        if model.cfg.head == CLASSIFICATION:
            correct += int(np.argmax(pred.data) == int(sample.label))
    n = len(samples)
    out = {k: v / n for k, v in sums.items()}
    out["accuracy"] = correct / n if model.cfg.head == CLASSIFICATION else float("nan")
    return out


def train(model: FusionModel, dataset: Dataset, cfg: TrainConfig,
          metrics_path=None, verbose: bool = False) -> list[dict]:
    """Optimize the model; returns per-epoch metric rows (train and val splits).

    Epoch 0 rows record the untrained model. Validation total loss drives
    both the plateau scheduler and early stopping; the returned model holds
    the final-epoch parameters.
    """
    train_samples = dataset.of_split("train")
    val_samples = dataset.of_split("val")
    if not train_samples or not val_samples:
        raise ValueError("train: need nonempty train and val splits")
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = Adam(params.values(), cfg.learning_rate)
    rows: list[dict] = []

    def log_epoch(epoch: int) -> dict:
        for split, samples in (("train", train_samples), ("val", val_samples)):
            metrics = evaluate(model, samples)
            rows.append({"epoch": epoch, "split": split, **metrics})
            if verbose:
                print(f"epoch {epoch:3d} {split:5s} "
                      f"task={metrics['loss_task']:.4f} ot={metrics['loss_ot']:.4f} "
                      f"mmd={metrics['loss_mmd']:.4f} acc={metrics['accuracy']:.3f}")
        return rows[-1]

    best_val = log_epoch(0)["loss_total"]
    plateau = 0
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            with tn.record() as tape:
                total = None
                for sample in batch:
                    pred, reps = forward(model, sample, train=True, rng=rng)
                    term = loss_terms(model, pred, reps, sample.label).total
                    total = term if total is None else total + term
                total = total * (1.0 / len(batch))
            if not np.all(np.isfinite(total.data)):
                where = tape.first_nonfinite()
                detail = f"op {where[1]!r} (tape node {where[0]})" if where else "loss"
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; first non-finite tensor: {detail}")
            tn.backward(total)
            clip_global_norm(params.values(), cfg.grad_clip)
            opt.step()
        val_loss = log_epoch(epoch)["loss_total"]
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            plateau = 0
            stall = 0
        else:
            plateau += 1
            stall += 1
            if plateau >= cfg.plateau_patience:
                opt.lr *= cfg.plateau_factor
                plateau = 0
            if stall >= cfg.early_stop_patience:
                break
    if metrics_path is not None:
        write_metrics_csv(rows, metrics_path)
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for row in rows:
            writer.writerow([row["epoch"], row["split"], f"{row['loss_task']:.17g}",
                             f"{row['loss_ot']:.17g}", f"{row['loss_mmd']:.17g}",
                             f"{row['accuracy']:.17g}"])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(METRICS_FIELDS):
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append({"epoch": int(rec["epoch"]), "split": rec["split"],
                         "loss_task": float(rec["loss_task"]),
                         "loss_ot": float(rec["loss_ot"]),
                         "loss_mmd": float(rec["loss_mmd"]),
                         "accuracy": float(rec["accuracy"])})
        return rows


# -- checkpoints -----------------------------------------------------------------

def config_to_dict(cfg: ModelConfig) -> dict:
    out = asdict(cfg)
    return out


def config_from_dict(payload: dict) -> ModelConfig:
    allowed = set(ModelConfig.__dataclass_fields__)
    unknown = set(payload) - allowed
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    payload = dict(payload)
    if "align" in payload and isinstance(payload["align"], dict):
        align_allowed = set(AlignConfig.__dataclass_fields__)
        align_unknown = set(payload["align"]) - align_allowed
        if align_unknown:
            raise ValueError(f"unknown align config keys: {sorted(align_unknown)}")
    return ModelConfig(**payload)


def save_checkpoint(model: FusionModel, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"checkpoint directory {out} is not empty (use force)")
    out.mkdir(parents=True, exist_ok=True)
    params = model.params()
    mapping = {}
    for i, name in enumerate(sorted(params)):
        fname = f"p{i:04d}.mat1"
        save_mat1(out / fname, params[name])
        mapping[name] = fname
    manifest = {"format": "ssmfuse-checkpoint-v1",
                "model_config": config_to_dict(model.cfg),
                "params": mapping}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(in_dir) -> FusionModel:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    model = FusionModel(config_from_dict(manifest["model_config"]))
    params = model.params()
    if set(manifest["params"]) != set(params):
        missing = set(params) ^ set(manifest["params"])
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)[:4]}")
    for name, fname in manifest["params"].items():
        stored = load_mat1(root / fname).data
        if stored.shape != params[name].data.shape:
            raise ValueError(f"checkpoint param {name}: shape {stored.shape} != "
                             f"{params[name].data.shape}")
        params[name].data[...] = stored
    return model
