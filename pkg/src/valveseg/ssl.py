"""Patient-level mean-teacher training with memory readout and topology regularization."""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import PatientSequence, Triplet, sample_triplet
from .memory import BACKWARD, FORWARD, MemoryBank, write
from .network import NetworkConfig, SegNet, get_parameters, set_parameters
from .topo import TCRConfig, tcr_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, components):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")


@dataclass
class TrainingConfig:
    alpha: float = 0.99
    beta: float = 1.0
    beta_rampup: float = 0.25  # fraction of total steps
    sigma: float = 0.1
    lam: float = 0.01
    eps: float = 1e-6
    tau: float = 0.05
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    epochs: int = 30
    seed: int = 0
    topk: int = 16
    enable_mcl: bool = True
    enable_tcr: bool = True
    memory_capacity: int = 4
    triplets_per_patient: int = 3
    clip_norm: float = 1.0
    soft_pseudo_labels: bool = False
    detach_reference: bool = False
    surface_mode: str = "normalized"
    dice_smooth: float = 1.0
    val_every: int = 5

    def __post_init__(self):
        # the closed endpoints are kept for the alpha=1 / alpha=0 identity checks
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("beta", "sigma", "lam", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.topk < 1 or self.memory_capacity < 3:
            raise ValueError("topk must be >= 1 and memory_capacity >= 3")

    def tcr(self) -> TCRConfig:
        return TCRConfig(lam=self.lam, eps=self.eps or 1e-12, tau=self.tau, mode=self.surface_mode,
                         detach_reference=self.detach_reference)


@dataclass
class LossReport:
    step: int
    l_sup: float
    l_consis: float
    l_seg: float
    l_surf: float
    l_vol: float
    l_tcp: float
    l_total: float
    lr: float = 0.0
    beta: float = 0.0

    CSV_FIELDS = ("step", "l_sup", "l_consis", "l_surf", "l_vol", "l_total", "lr", "beta")

    def row(self) -> list:
        return [self.step] + [repr(float(getattr(self, f))) for f in self.CSV_FIELDS[1:]]


# --------------------------------------------------------------------------- pieces


def ema_update(theta_t, theta_s, alpha: float):
    """New teacher parameters alpha * teacher + (1 - alpha) * student."""
    if set(theta_t) != set(theta_s):
        raise ValueError("teacher and student parameter names differ")
    out = OrderedDict()
    for name, t in theta_t.items():
        s = theta_s[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}")
        if alpha == 1:
            out[name] = t.clone()
        elif alpha == 0:
            out[name] = s.clone()
        else:
            out[name] = alpha * t + (1 - alpha) * s
    return out


def dice_bce_loss(P: torch.Tensor, Y: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """0.8 * (1 - soft Dice) + 0.2 * mean binary cross-entropy."""
    if P.shape != Y.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(P.shape)}, target {tuple(Y.shape)}")
    Y = Y.to(P.dtype)
    dice = (2 * (P * Y).sum() + smooth) / (P.sum() + Y.sum() + smooth)
    Pc = P.clamp(1e-6, 1 - 1e-6)
    bce = -(Y * torch.log(Pc) + (1 - Y) * torch.log(1 - Pc)).mean()
    return 0.8 * (1 - dice) + 0.2 * bce


def pseudo_label(P_teacher: torch.Tensor, soft: bool = False) -> torch.Tensor:
    P = P_teacher.detach()
    return P if soft else (P > 0.5).to(P.dtype)


def consistency_loss(P_student, P_teacher, soft: bool = False, smooth: float = 1.0):
    if P_student.shape != P_teacher.shape:
        raise ValueError(f"shape mismatch: {tuple(P_student.shape)} vs {tuple(P_teacher.shape)}")
    return dice_bce_loss(P_student, pseudo_label(P_teacher, soft), smooth)


def beta_at(step: int, total_steps: int, cfg: TrainingConfig) -> float:
    """Sigmoid-shaped ramp from ~0 to ``cfg.beta`` over the first ``beta_rampup`` of training."""
    length = cfg.beta_rampup * total_steps
    if length <= 0 or step >= length:
        return cfg.beta
    phase = 1.0 - step / length
    return cfg.beta * math.exp(-5.0 * phase * phase)


def lr_at(epoch: int, cfg: TrainingConfig) -> float:
    """Step decay; ``epoch`` is zero-based."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def empty_banks(sequence_or_anchors, capacity: int = 4):
    anchors = getattr(sequence_or_anchors, "labeled_indices", sequence_or_anchors)
    anchors = frozenset(int(t) for t in anchors)
    return MemoryBank(FORWARD, capacity, anchors), MemoryBank(BACKWARD, capacity, anchors)


def bank_view(banks, t: int):
    if banks is None:
        return None
    return banks[0].visible_to(t), banks[1].visible_to(t)


def write_phases(banks, phase_indices, features: list):
    """Add (keys, values) per phase: ascending into the forward bank, descending into the backward one."""
    M_f, M_b = banks
    order = sorted(range(len(phase_indices)), key=lambda i: phase_indices[i])
    for i in order:
        M_f = write(M_f, phase_indices[i], *features[i])
    for i in reversed(order):
        M_b = write(M_b, phase_indices[i], *features[i])
    return M_f, M_b


def _stack(phases):
    return torch.from_numpy(np.stack([p.intensities for p in phases]).astype(np.float32))


# --------------------------------------------------------------------------- training step


def compute_losses(triplet: Triplet, student: SegNet, teacher: SegNet, banks, cfg: TrainingConfig,
                   beta: float, teacher_out=None):
    """Forward both models on a triplet; returns (l_total tensor, parts dict, teacher features).

    Teacher outputs can be passed in (``teacher_out = (P_t, feats)``) so a caller
    perturbing student weights keeps the pseudo-labels fixed.
    """
    phases = [triplet.labeled, triplet.unlabeled_1, triplet.unlabeled_2]
    idx = [p.phase_index for p in phases]
    views = [bank_view(banks, t) if cfg.enable_mcl else None for t in idx]
    dtype = next(student.parameters()).dtype
    x = _stack(phases).to(dtype)

    P_s, _ = student.forward_batch(x, views, cfg.topk)
    if teacher_out is None:
        with torch.no_grad():
            teacher_out = teacher.forward_batch(x, views, cfg.topk)
    P_t, t_feats = teacher_out

    Y = torch.from_numpy(triplet.labeled.label.astype(np.float32)).to(dtype)
    l_sup = dice_bce_loss(P_s[0], Y, cfg.dice_smooth)
    l_consis = 0.5 * (
        consistency_loss(P_s[1], P_t[1], cfg.soft_pseudo_labels, cfg.dice_smooth)
        + consistency_loss(P_s[2], P_t[2], cfg.soft_pseudo_labels, cfg.dice_smooth)
    )
    if cfg.enable_tcr:
        l_surf, l_vol, l_tcp = tcr_loss(P_s[0], P_s[1], P_s[2], triplet.labeled.spacing, cfg.tcr())
    else:
        l_surf = l_vol = l_tcp = torch.zeros((), dtype=dtype)
    # scalar bookkeeping in float64 so the reported identities are exact
    l_sup, l_consis = l_sup.double(), l_consis.double()
    l_surf, l_vol = l_surf.double(), l_vol.double()
    l_seg = l_sup + beta * l_consis
    l_tcp = l_surf + l_vol
    l_total = l_seg + cfg.sigma * l_tcp
    parts = dict(l_sup=l_sup, l_consis=l_consis, l_seg=l_seg, l_surf=l_surf, l_vol=l_vol, l_tcp=l_tcp,
                 l_total=l_total)
    return l_total, parts, (P_t, t_feats, idx)


def train_step(triplet: Triplet, student: SegNet, teacher: SegNet, banks, cfg: TrainingConfig,
               optimizer: torch.optim.Optimizer, step: int = 0, beta: Optional[float] = None):
    """One student update plus EMA; returns (LossReport, updated banks)."""
    beta = cfg.beta if beta is None else beta
    student.train()
    l_total, parts, (P_t, t_feats, idx) = compute_losses(triplet, student, teacher, banks, cfg, beta)
    values = {k: float(v.detach()) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(step, values)

    optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    if cfg.clip_norm:
        torch.nn.utils.clip_grad_norm_(student.parameters(), cfg.clip_norm)
    optimizer.step()

    set_parameters(teacher, ema_update(get_parameters(teacher), get_parameters(student), cfg.alpha))

    if cfg.enable_mcl and banks is not None:
        banks = write_phases(banks, idx, [t_feats.sample(i) for i in range(len(idx))])
    lr = optimizer.param_groups[0]["lr"]
    return LossReport(step=step, lr=lr, beta=beta, **values), banks


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    student: SegNet
    teacher: SegNet
    trace: list
    best_params: Optional[dict] = None
    best_score: float = float("nan")
    val_history: list = field(default_factory=list)
    step: int = 0


def make_models(net_cfg: Optional[NetworkConfig], seed: int):
    torch.manual_seed(seed)
    student = SegNet(net_cfg)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return student, teacher


def train(dataset: Sequence[PatientSequence], cfg: TrainingConfig, net_cfg: Optional[NetworkConfig] = None,
          val_set: Sequence[PatientSequence] = (), on_report: Optional[Callable] = None) -> TrainResult:
    """Epoch loop over patients; banks reset per patient, one or more triplets each."""
    if not dataset:
        raise ValueError("training set is empty")
    student, teacher = make_models(net_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    total = cfg.epochs * len(dataset) * cfg.triplets_per_patient
    result = TrainResult(student, teacher, [])
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for g in optimizer.param_groups:
            g["lr"] = lr
        for pi in rng.permutation(len(dataset)):
            seq = dataset[int(pi)]
            banks = empty_banks(seq, cfg.memory_capacity) if cfg.enable_mcl else None
            for _ in range(cfg.triplets_per_patient):
                triplet = sample_triplet(seq, rng)
                report, banks = train_step(triplet, student, teacher, banks, cfg, optimizer, step,
                                           beta_at(step, total, cfg))
                result.trace.append(report)
                if on_report:
                    on_report(report)
                step += 1
        if val_set and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
            score = validation_dice(teacher, val_set, cfg)
            result.val_history.append((epoch + 1, score))
            log.info("epoch %d val dice %.4f", epoch + 1, score)
            if not score <= result.best_score:  # also true while best is nan
                result.best_score = score
                result.best_params = {"student": get_parameters(student), "teacher": get_parameters(teacher)}
    result.step = step
    return result


def write_trace_csv(trace: Sequence[LossReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LossReport.CSV_FIELDS)
        for r in trace:
            w.writerow(r.row())
    return path


# --------------------------------------------------------------------------- inference


@torch.no_grad()
def predict_sequence(model: SegNet, sequence: PatientSequence, enable_mcl: bool = True, k: int = 16,
                     capacity: int = 4) -> list:
    """One probability map per phase.

    With memory enabled the forward bank is built by an ascending sweep and
    the backward bank by a descending one; phase ``t`` then reads the
    forward bank as it stood before ``t`` and the backward bank likewise.
    """
    if sequence is None or not sequence.phases:
        raise ValueError("cannot predict an empty sequence")
    model.eval()
    if not enable_mcl:
        return [model.forward_segment(p.intensities, None, k)[0].cpu().numpy() for p in sequence.phases]

    n = sequence.n_phases
    feats = model.encode(_stack(sequence.phases))
    M_f, M_b = empty_banks(sequence, capacity)
    before_f, before_b = [None] * n, [None] * n
    for t in range(n):
        before_f[t] = M_f
        M_f = write(M_f, t, *feats.sample(t))
    for t in reversed(range(n)):
        before_b[t] = M_b
        M_b = write(M_b, t, *feats.sample(t))
    readouts = [model.read_memory(feats, (before_f[t].visible_to(t), before_b[t].visible_to(t)), k, t)
                for t in range(n)]
    P = model.decode(feats, readouts)
    return [P[t].cpu().numpy() for t in range(n)]


def validation_dice(model: SegNet, sequences: Sequence[PatientSequence], cfg: TrainingConfig) -> float:
    from .metrics import dice

    scores = []
    for seq in sequences:
        preds = predict_sequence(model, seq, cfg.enable_mcl, cfg.topk, cfg.memory_capacity)
        gt = seq.ground_truth or [p.label for p in seq.phases]
        for P, Y in zip(preds, gt):
            if Y is not None:
                scores.append(dice(P > 0.5, Y > 0))
    return float(np.mean(scores)) if scores else float("nan")


def config_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
