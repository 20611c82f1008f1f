"""Teacher training, student distillation training and evaluation runs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augmentation import mix_augment, schedule_at
from .backbone import (
    CheckpointMismatch,
    ConfigError,
    EncoderConfig,
    ViTEncoder,
    check_encoder_config,
    load_into,
    read_checkpoint,
    save_checkpoint,
)
from .config import ExperimentConfig
from .data import DatasetError, ImageStore, batches, normalize, scan_dataset, split
from .distillation import AlignmentProjections, LayerPairSpec, distill_loss, tail_layer_pairs
from .hashing import HashHead, HashHeadConfig, sign_quantize
from .objectives import LossBreakdown, hamming_triplet, student_total, supervised_contrastive, teacher_total
from .retrieval import MetricsReport, build_index, evaluate_index

logger = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


class HashNetwork(nn.Module):
    """Encoder plus hash head; ``forward`` returns ``(encoder_output, h)``."""

    def __init__(self, encoder_config: EncoderConfig, code_bits: int, seed: int | None = None):
        super().__init__()
        self.encoder = ViTEncoder(encoder_config, seed=seed)
        self.head = HashHead(HashHeadConfig(encoder_config.hidden_dim, code_bits),
                             seed=None if seed is None else seed + 1)

    def forward(self, images: torch.Tensor):
        out = self.encoder(images)
        return out, self.head(out.final_class_token)

    def configs(self) -> dict:
        return {"encoder": self.encoder.config.to_dict(), "head": self.head.config.to_dict()}


def save_network(net: HashNetwork, path: Path, role: str,
                 projections: AlignmentProjections | None = None, extra: dict | None = None) -> None:
    modules = {"encoder": net.encoder, "head": net.head}
    configs = {**net.configs(), "role": role}
    if projections is not None:
        modules["projections"] = projections
        configs["projections"] = {
            "teacher_dim": projections.global_proj[0].shape[0],
            "student_dim": projections.global_proj[0].shape[1],
            "num_pairs": len(projections.global_proj),
        }
    save_checkpoint(modules, configs, path, extra)


def load_network(path: str | Path, expected: EncoderConfig | None = None,
                 code_bits: int | None = None, role: str | None = None) -> tuple[HashNetwork, dict]:
    configs, tensors, extra = read_checkpoint(path)
    if "encoder" not in configs or "head" not in configs:
        raise CheckpointMismatch(f"{path}: not a hash network checkpoint")
    if role is not None and configs.get("role") != role:
        raise CheckpointMismatch(f"{path}: expected a {role} checkpoint, found {configs.get('role')!r}")
    if expected is not None:
        check_encoder_config(configs["encoder"], expected)
    if code_bits is not None and configs["head"]["code_bits"] != code_bits:
        raise CheckpointMismatch(
            f"{path}: code_bits {configs['head']['code_bits']} != expected {code_bits}"
        )
    net = HashNetwork(EncoderConfig(**configs["encoder"]), configs["head"]["code_bits"])
    load_into({"encoder": net.encoder, "head": net.head}, tensors)
    return net, {"configs": configs, "tensors": tensors, "extra": extra}


@dataclass
class TrainingLog:
    seed: int
    config: dict
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def write(self, out_dir: Path) -> None:
        cols = ["epoch", *LossBreakdown.FIELDS]
        with open(out_dir / "log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for row in self.epochs:
                w.writerow([row["epoch"]] + [repr(row[k]) for k in LossBreakdown.FIELDS])
        with open(out_dir / "steps.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "step", "lambda", "p", *LossBreakdown.FIELDS])
            for row in self.steps:
                w.writerow([row["epoch"], row["step"], repr(row["lambda"]), repr(row["p"])]
                           + [repr(row[k]) for k in LossBreakdown.FIELDS])
        # wall clock stays out of log.csv so deterministic runs compare equal
        (out_dir / "run.json").write_text(json.dumps(
            {"seed": self.seed, "wall_clock_seconds": self.wall_clock, "epochs": len(self.epochs)},
            indent=2))


@dataclass
class RunResult:
    checkpoint: Path
    best_checkpoint: Path
    log: TrainingLog
    output_dir: Path


def configure_determinism(config: ExperimentConfig) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def load_splits(config: ExperimentConfig) -> tuple[ImageStore, ImageStore]:
    manifest = scan_dataset(config.data.root)
    train_m, test_m = split(manifest, config.split)
    return ImageStore(train_m, config.data.image_size), ImageStore(test_m, config.data.image_size)


def resolve_pairs(config: ExperimentConfig) -> list[LayerPairSpec]:
    if not config.layer_pairs:
        return tail_layer_pairs(config.student.num_layers, config.teacher.num_layers)
    pairs = [LayerPairSpec(int(s), int(t)) for s, t in config.layer_pairs]
    for p in pairs:
        if not (1 <= p.student_layer_index <= config.student.num_layers
                and 1 <= p.teacher_layer_index <= config.teacher.num_layers):
            raise ConfigError(f"layer pair {p} out of range")
    return pairs


def _optimizer(params, config: ExperimentConfig, epochs: int, steps_per_epoch: int):
    opt = torch.optim.SGD(params, lr=config.optim.learning_rate, momentum=config.optim.momentum,
                          weight_decay=config.optim.weight_decay)
    sched = None
    if config.optim.cosine:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs * steps_per_epoch))
    return opt, sched


def _augment_batch(images, labels, epoch, total_epochs, config, patch_size, generator):
    if not config.augment.enabled:
        return images, labels, 0.0, 0.0
    lam, p = schedule_at(epoch, total_epochs, config.augment)
    aug = mix_augment(images, labels, lam, p, config.augment, generator, patch_size=patch_size)
    return aug.images, aug.labels, lam, p


def _check_finite(parts: dict, out_dir: Path, epoch: int, step: int, images: torch.Tensor) -> None:
    values = {k: float(v.detach()) for k, v in parts.items()}
    if all(math.isfinite(v) for v in values.values()):
        return
    dump = out_dir / "nonfinite_dump.json"
    dump.write_text(json.dumps({
        "epoch": epoch, "step": step, "losses": {k: repr(v) for k, v in values.items()},
        "batch_min": float(images.min()), "batch_max": float(images.max()),
    }, indent=2))
    raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}: {values} (dump: {dump})")


def _trainable(*modules: nn.Module) -> list[nn.Parameter]:
    return [p for m in modules for p in m.parameters() if p.requires_grad]


def _finish_epoch(log: TrainingLog, epoch: int, sums: dict, count: int) -> float:
    row = {"epoch": epoch, **{k: sums[k] / count for k in LossBreakdown.FIELDS}}
    log.epochs.append(row)
    logger.info("epoch %d  %s", epoch,
                "  ".join(f"{k}={row[k]:.4f}" for k in LossBreakdown.FIELDS))
    return row["total"]


def _prepare_dir(config: ExperimentConfig, sub: str) -> Path:
    out = config.resolved_output_dir() / sub
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "effective_config.yaml")
    return out


def train_teacher(config: ExperimentConfig, stores=None) -> RunResult:
    """Optimize contrastive + alpha_t * triplet on the teacher's unfrozen parameters."""
    configure_determinism(config)
    out = _prepare_dir(config, "teacher")
    train_store, _ = stores or load_splits(config)
    if len(train_store) == 0:
        raise DatasetError("training split is empty")
    net = HashNetwork(config.teacher, config.code_bits, seed=config.seed)
    loss_cfg = config.loss
    margin = loss_cfg.margin_for(config.code_bits)
    epochs = config.epochs_teacher
    steps = math.ceil(len(train_store) / config.batch_size)
    opt, sched = _optimizer(_trainable(net), config, epochs, steps)
    gen = torch.Generator().manual_seed(config.seed + 7)
    log = TrainingLog(config.seed, config.to_dict())
    best = math.inf
    t0 = time.perf_counter()
    patch = config.augment.patch_size or config.teacher.patch_size
    for epoch in range(epochs):
        net.train()
        sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
        n = 0
        for step, (images, labels) in enumerate(batches(train_store, config.batch_size, config.seed, epoch)):
            images, labels, lam, p = _augment_batch(images, labels, epoch, epochs, config, patch, gen)
            x = normalize(images, config.data.normalize_mean, config.data.normalize_std)
            _, h = net(x)
            con = supervised_contrastive(h, labels, loss_cfg.temperature, loss_cfg.epsilon,
                                         loss_cfg.normalize_contrastive)
            if loss_cfg.alpha_teacher > 0:
                tri = hamming_triplet(h, labels, margin, loss_cfg.triplet_norm)
            else:
                tri = h.new_zeros(())
            total = teacher_total(con, tri, loss_cfg)
            parts = {"contrastive": con, "triplet": tri, "total": total}
            _check_finite(parts, out, epoch, step, images)
            opt.zero_grad()
            total.backward()
            opt.step()
            if sched:
                sched.step()
            record = LossBreakdown(contrastive=float(con.detach()), triplet=float(tri.detach()),
                                   total=float(total.detach())).as_dict()
            log.steps.append({"epoch": epoch, "step": step, "lambda": lam, "p": p, **record})
            for k in LossBreakdown.FIELDS:
                sums[k] += record[k]
            n += 1
        epoch_total = _finish_epoch(log, epoch, sums, n)
        if epoch_total < best:
            best = epoch_total
            save_network(net, out / "best.pt", "teacher", extra={"epoch": epoch})
    save_network(net, out / "final.pt", "teacher", extra={"epoch": epochs - 1})
    log.wall_clock = time.perf_counter() - t0
    log.write(out)
    if config.plots:
        plot_losses(log, out / "loss.png")
    return RunResult(out / "final.pt", out / "best.pt", log, out)


def train_student(config: ExperimentConfig, teacher_checkpoint: str | Path | None = None,
                  stores=None) -> RunResult:
    """Optimize the student objective; the teacher (if distilling) stays fixed."""
    configure_determinism(config)
    out = _prepare_dir(config, "student")
    train_store, _ = stores or load_splits(config)
    if len(train_store) == 0:
        raise DatasetError("training split is empty")
    loss_cfg = config.loss
    distilling = loss_cfg.beta_student > 0
    teacher = None
    pairs = resolve_pairs(config)
    if distilling:
        if teacher_checkpoint is None:
            raise ConfigError("distillation is enabled (beta_student > 0) but no teacher checkpoint was given")
        if (config.teacher.patch_size, config.teacher.image_size) != (config.student.patch_size,
                                                                       config.student.image_size):
            raise ConfigError(
                "teacher and student must share patch_size and image_size so their token grids align"
            )
        teacher, _ = load_network(teacher_checkpoint, config.teacher, config.code_bits, role="teacher")
        teacher.eval()
        for prm in teacher.parameters():
            prm.requires_grad_(False)
    net = HashNetwork(config.student, config.code_bits, seed=config.seed + 100)
    projections = AlignmentProjections(config.teacher.hidden_dim, config.student.hidden_dim,
                                       len(pairs), seed=config.seed + 200)
    margin = loss_cfg.margin_for(config.code_bits)
    epochs = config.epochs_student
    steps = math.ceil(len(train_store) / config.batch_size)
    opt, sched = _optimizer(_trainable(net, projections), config, epochs, steps)
    gen = torch.Generator().manual_seed(config.seed + 7)
    log = TrainingLog(config.seed, config.to_dict())
    best = math.inf
    t0 = time.perf_counter()
    patch = config.augment.patch_size or config.student.patch_size
    for epoch in range(epochs):
        net.train()
        sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
        n = 0
        for step, (images, labels) in enumerate(batches(train_store, config.batch_size, config.seed, epoch)):
            images, labels, lam, p = _augment_batch(images, labels, epoch, epochs, config, patch, gen)
            x = normalize(images, config.data.normalize_mean, config.data.normalize_std)
            s_out, h_s = net(x)
            con = supervised_contrastive(h_s, labels, loss_cfg.temperature, loss_cfg.epsilon,
                                         loss_cfg.normalize_contrastive)
            zero = h_s.new_zeros(())
            tri = hamming_triplet(h_s, labels, margin, loss_cfg.triplet_norm) if loss_cfg.alpha_student > 0 else zero
            if distilling:
                with torch.no_grad():
                    t_out, h_t = teacher(x)
                d = distill_loss(t_out, s_out, h_t, h_s, pairs, projections, loss_cfg.gamma,
                                 config.window_size)
            else:
                d = {"high": zero, "global": zero, "local": zero, "distill": zero}
            total = student_total(con, tri, d["distill"], loss_cfg)
            parts = {"contrastive": con, "triplet": tri, **d, "total": total}
            _check_finite(parts, out, epoch, step, images)
            opt.zero_grad()
            total.backward()
            opt.step()
            if sched:
                sched.step()
            record = {k: float(parts[k].detach()) for k in LossBreakdown.FIELDS}
            log.steps.append({"epoch": epoch, "step": step, "lambda": lam, "p": p, **record})
            for k in LossBreakdown.FIELDS:
                sums[k] += record[k]
            n += 1
        epoch_total = _finish_epoch(log, epoch, sums, n)
        if epoch_total < best:
            best = epoch_total
            save_network(net, out / "best.pt", "student", projections, extra={"epoch": epoch})
    save_network(net, out / "final.pt", "student", projections, extra={"epoch": epochs - 1})
    log.wall_clock = time.perf_counter() - t0
    log.write(out)
    if config.plots:
        plot_losses(log, out / "loss.png")
    return RunResult(out / "final.pt", out / "best.pt", log, out)


@torch.no_grad()
def encode_store(net: HashNetwork, store: ImageStore, config: ExperimentConfig,
                 batch_size: int = 256) -> np.ndarray:
    """Ternary codes for every image in ``store`` (no augmentation)."""
    net.eval()
    codes = []
    for images, _ in batches(store, batch_size):
        x = normalize(images, config.data.normalize_mean, config.data.normalize_std)
        codes.append(sign_quantize(net(x)[1]))
    if not codes:
        return np.zeros((0, net.head.config.code_bits), dtype=np.int8)
    return np.concatenate(codes)


def evaluate(config: ExperimentConfig, checkpoint: str | Path, split_roles: tuple[str, str] | None = None,
             stores=None, out_dir: str | Path | None = None) -> MetricsReport:
    """Encode gallery and queries, build the index and write metrics.csv / pr.csv.

    ``split_roles`` is ``(gallery_split, query_split)``; each is "train" or "test".
    """
    configure_determinism(config)
    net, info = load_network(checkpoint)
    enc_cfg = net.encoder.config
    if enc_cfg.image_size != config.data.image_size:
        raise ConfigError(
            f"checkpoint image_size {enc_cfg.image_size} != data.image_size {config.data.image_size}"
        )
    gallery_role, query_role = split_roles or (config.eval.gallery_split, config.eval.query_split)
    train_store, test_store = stores or load_splits(config)
    by_role = {"train": train_store, "test": test_store}
    gallery, queries = by_role[gallery_role], by_role[query_role]
    if len(gallery) == 0 or len(queries) == 0:
        raise DatasetError(f"empty split: gallery={len(gallery)} queries={len(queries)}")
    g_codes = encode_store(net, gallery, config)
    q_codes = encode_store(net, queries, config)
    index = build_index(g_codes, gallery.manifest.labels)
    report = evaluate_index(index, q_codes, queries.manifest.labels, config.eval.k_grid,
                            config.eval.map_cutoff)
    out = Path(out_dir) if out_dir else config.resolved_output_dir() / "eval" / info["configs"].get("role", "model")
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "effective_config.yaml")
    report.write(out / "metrics.csv", out / "pr.csv")
    index.save(out / "gallery.codes", gallery.manifest.paths)
    if config.plots:
        plot_pr(report, out / "pr.png")
    logger.info("MAP=%.4f (%d queries, gallery %d)", report.map, len(queries), len(gallery))
    return report


def plot_losses(log: TrainingLog, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [r["epoch"] for r in log.epochs]
    for key in LossBreakdown.FIELDS:
        vals = [r[key] for r in log.epochs]
        if any(vals):
            ax.plot(epochs, vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_pr(report: MetricsReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    r, p = zip(*report.pr_points)
    ax.plot(r, p)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
