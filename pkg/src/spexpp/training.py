"""Multi-task objective, Adam training loop with plateau halving and early
stopping, dev evaluation and finite-difference gradient checks."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .dataset import Manifest, MixtureExample
from .multistage import PipelineOutput, SpExPlusPlus, forward_pipeline
from .signal_core import batch_si_sdr, improvement, si_sdr_loss

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    max_epochs: int = 100
    lr_init: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_patience_epochs: int = 2
    early_stop_patience: int = 6
    segment_seconds: float = 4.0
    # reference crop length; None uses the shortest reference in the training set
    reference_crop_seconds: Optional[float] = None
    batch_size: int = 8
    crops_per_example: int = 1
    multitask_gamma: float = 0.5
    max_grad_norm: float = 5.0
    seed: int = 0
    sample_rate: int = 8000

    def __post_init__(self):
        for name in ("max_epochs", "lr_init", "lr_decay_factor", "segment_seconds", "batch_size",
                     "crops_per_example"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr_patience_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.multitask_gamma < 0:
            raise ValueError("multitask_gamma must be non-negative")


# --------------------------------------------------------------------------
# Objective


def total_loss(out: PipelineOutput, target: torch.Tensor, speaker_label, gamma: float,
               stage_weights: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Mean over stages of negative SI-SDR plus ``gamma`` times mean stage CE.

    ``stage_weights`` replaces the uniform 1/K stage averaging when given.
    """
    k = len(out.stages)
    if stage_weights is None:
        stage_weights = [1.0 / k] * k
    if target.dim() == 1:
        target = target.unsqueeze(0)
    labels = torch.as_tensor(speaker_label, dtype=torch.long).reshape(-1)
    num_classes = out.stages[0].speaker_logits.shape[-1]
    if bool(torch.any(labels >= num_classes)) or bool(torch.any(labels < 0)):
        raise ValueError(f"speaker label out of range for {num_classes} classes: {labels.tolist()}")
    loss = 0.0
    for w, stage in zip(stage_weights, out.stages):
        loss = loss + w * si_sdr_loss(stage.fused, target.to(stage.fused.dtype))
        if gamma:
            loss = loss + w * gamma * F.cross_entropy(stage.speaker_logits, labels)
    return loss


# --------------------------------------------------------------------------
# Schedule


class PlateauSchedule:
    """Halve the lr after ``patience`` epochs without a new best dev metric;
    signal a stop after ``stop_patience`` epochs without one. Higher is better."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 2, stop_patience: int = 6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.stop_patience = stop_patience
        self.best = -math.inf
        self.epochs_since_best = 0
        self.stale = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; return True if it is a new best."""
        if metric > self.best:
            self.best = metric
            self.epochs_since_best = 0
            self.stale = 0
            return True
        self.epochs_since_best += 1
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.stop_patience

    def state_dict(self) -> dict:
        return dict(lr=self.lr, best=self.best, epochs_since_best=self.epochs_since_best,
                    stale=self.stale)

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = state["best"]
        self.epochs_since_best = state["epochs_since_best"]
        self.stale = state["stale"]


# --------------------------------------------------------------------------
# Data


def load_examples(source) -> List[MixtureExample]:
    if isinstance(source, Manifest):
        return [source.load_example(i) for i in range(len(source))]
    return list(source)


def _crop(x: np.ndarray, start: int, length: int) -> np.ndarray:
    seg = x[start:start + length]
    if len(seg) < length:
        seg = np.pad(seg, (0, length - len(seg)))
    return seg


def make_batches(examples: Sequence[MixtureExample], tcfg: TrainConfig, epoch: int):
    """Yield ``(batch_seed, mixture, reference, target, labels)`` tensors.

    Each example contributes ``crops_per_example`` random segments per epoch.
    Order and crops depend only on ``(seed, epoch)``.
    """
    rng = np.random.default_rng([tcfg.seed, epoch])
    order = rng.permutation(np.repeat(np.arange(len(examples)), tcfg.crops_per_example))
    seg = int(round(tcfg.segment_seconds * tcfg.sample_rate))
    if tcfg.reference_crop_seconds:
        ref_len = int(round(tcfg.reference_crop_seconds * tcfg.sample_rate))
    else:
        ref_len = min(len(ex.reference) for ex in examples)
    for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
        idx = order[start:start + tcfg.batch_size]
        mixes, refs, tgts = [], [], []
        for i in idx:
            ex = examples[i]
            n = len(ex.mixture)
            offset = 0
            for _ in range(8):
                offset = int(rng.integers(0, max(1, n - seg + 1)))
                if np.any(_crop(ex.target.samples, offset, seg)):
                    break
            mixes.append(_crop(ex.mixture.samples, offset, seg))
            tgts.append(_crop(ex.target.samples, offset, seg))
            r_off = int(rng.integers(0, max(1, len(ex.reference) - ref_len + 1)))
            refs.append(_crop(ex.reference.samples, r_off, ref_len))
        labels = torch.tensor([examples[i].speaker_id for i in idx], dtype=torch.long)
        yield ((tcfg.seed, epoch, b),
               torch.tensor(np.stack(mixes), dtype=torch.float32),
               torch.tensor(np.stack(refs), dtype=torch.float32),
               torch.tensor(np.stack(tgts), dtype=torch.float32),
               labels)


# --------------------------------------------------------------------------
# Evaluation


@torch.no_grad()
def evaluate_examples(model: SpExPlusPlus, examples: Sequence[MixtureExample]) -> List[dict]:
    """Per-example, per-stage SDRi / SI-SDRi on full-length signals."""
    model.eval()
    rows = []
    for i, ex in enumerate(examples):
        out = forward_pipeline(ex.mixture, ex.reference, model)
        for k, stage in enumerate(out.stages, 1):
            est = stage.fused[0].double().numpy()
            sdri, si_sdri = improvement(est, ex.mixture.samples, ex.target.samples)
            rows.append(dict(index=i, stage=k, condition=ex.condition, sdri=sdri, si_sdri=si_sdri))
    return rows


def mean_si_sdri(model: SpExPlusPlus, examples: Sequence[MixtureExample],
                 stage: Optional[int] = None) -> float:
    stage = model.num_stages if stage is None else stage
    rows = [r for r in evaluate_examples(model, examples) if r["stage"] == stage]
    return float(np.mean([r["si_sdri"] for r in rows]))


# --------------------------------------------------------------------------
# Training loop


@dataclass
class FitResult:
    best_state: dict
    best_metric: float
    history: List[dict] = field(default_factory=list)
    best_checkpoint: Optional[Path] = None


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(model: SpExPlusPlus, train, dev, tcfg: TrainConfig, *,
        out_dir=None, resume: bool = False,
        validate: Optional[Callable[[SpExPlusPlus, int], float]] = None) -> FitResult:
    """Train with Adam until early stopping or ``max_epochs``.

    ``train``/``dev`` are manifests or example lists. ``validate(model, epoch)``
    replaces the dev SI-SDRi computation when given. With ``out_dir`` the best
    checkpoint (``best.npz``), ``history.jsonl`` and a resumable
    ``train_state.pt`` are written after every epoch.
    """
    train_ex = load_examples(train)
    dev_ex = load_examples(dev)
    if not train_ex:
        raise ValueError("empty training set")
    if validate is None and not dev_ex:
        raise ValueError("empty dev set")
    num_classes = model.config.num_speakers
    bad = sorted({ex.speaker_id for ex in train_ex + dev_ex if ex.speaker_id >= num_classes})
    if bad:
        raise ValueError(f"speaker ids {bad} exceed classifier size {num_classes}")
    if validate is None:
        validate = lambda m, epoch: mean_si_sdri(m, dev_ex)  # noqa: E731

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr_init)
    schedule = PlateauSchedule(tcfg.lr_init, tcfg.lr_decay_factor, tcfg.lr_patience_epochs,
                               tcfg.early_stop_patience)
    history: List[dict] = []
    best_state = _snapshot(model)
    start_epoch = 1

    state_path = out_dir / "train_state.pt" if out_dir is not None else None
    if resume:
        if state_path is None or not state_path.exists():
            raise FileNotFoundError(f"no training state to resume in {out_dir}")
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        schedule.load_state_dict(state["schedule"])
        history = state["history"]
        best_state = state["best_model"]
        torch.set_rng_state(state["torch_rng"])
        start_epoch = state["epoch"] + 1
        if state.get("stopped"):
            start_epoch = tcfg.max_epochs + 1

    for epoch in range(start_epoch, tcfg.max_epochs + 1):
        for group in optimizer.param_groups:
            group["lr"] = schedule.lr
        lr = schedule.lr
        model.train()
        losses = []
        for batch_seed, mix, ref, tgt, labels in make_batches(train_ex, tcfg, epoch):
            out = model(mix, ref)
            loss = total_loss(out, tgt, labels, tcfg.multitask_gamma)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss {loss.item()} at batch seed {batch_seed}")
            optimizer.zero_grad()
            loss.backward()
            if tcfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.max_grad_norm)
            optimizer.step()
            losses.append(loss.item())

        metric = float(validate(model, epoch))
        improved = schedule.step(metric)
        if improved:
            best_state = _snapshot(model)
        record = dict(epoch=epoch, train_loss=float(np.mean(losses)), dev_sisdri=metric, lr=lr,
                      fusion_weights=model.fusion_weights())
        history.append(record)
        logger.info("epoch %d loss %.3f dev %.3f lr %.2e%s", epoch, record["train_loss"], metric,
                    lr, " *" if improved else "")
        stop = schedule.should_stop
        if out_dir is not None:
            with open(out_dir / "history.jsonl", "a" if epoch > 1 else "w", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            if improved:
                _save_best(model, best_state, out_dir / "best.npz", epoch, metric)
            torch.save(dict(model=model.state_dict(), optimizer=optimizer.state_dict(),
                            schedule=schedule.state_dict(), history=history,
                            best_model=best_state, torch_rng=torch.get_rng_state(),
                            epoch=epoch, stopped=stop, train_config=asdict(tcfg)),
                       state_path)
        if stop:
            logger.info("early stop after epoch %d", epoch)
            break

    model.load_state_dict(best_state)
    best_path = out_dir / "best.npz" if out_dir is not None else None
    return FitResult(best_state, schedule.best, history, best_path)


def _save_best(model, best_state, path, epoch, metric):
    clone = copy.deepcopy(model)
    clone.load_state_dict(best_state)
    save_checkpoint(clone, path, meta=dict(epoch=epoch, dev_sisdri=metric))


# --------------------------------------------------------------------------
# Gradient checking


def gradcheck(model: SpExPlusPlus, example: MixtureExample, parameter_subset, h: float = 1e-6,
              gamma: float = 0.5) -> float:
    """Largest relative error between autograd and central differences.

    ``parameter_subset`` is a list of ``(parameter_name, flat_index)`` pairs.
    The check runs on a float64 copy of the model. Relative errors use
    ``max(|analytic|, |numeric|, 1e-5)`` as denominator.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    params = dict(m.named_parameters())
    mixture = torch.as_tensor(example.mixture.samples, dtype=torch.float64).unsqueeze(0)
    reference = torch.as_tensor(example.reference.samples, dtype=torch.float64).unsqueeze(0)
    target = torch.as_tensor(example.target.samples, dtype=torch.float64).unsqueeze(0)
    label = torch.tensor([example.speaker_id])

    def loss_value():
        return total_loss(m(mixture, reference), target, label, gamma)

    m.zero_grad()
    loss_value().backward()
    worst = 0.0
    with torch.no_grad():
        for name, index in parameter_subset:
            p = params[name]
            analytic = p.grad.reshape(-1)[index].item()
            flat = p.data.view(-1)
            orig = flat[index].item()
            flat[index] = orig + h
            plus = loss_value().item()
            flat[index] = orig - h
            minus = loss_value().item()
            flat[index] = orig
            numeric = (plus - minus) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            worst = max(worst, err)
    return worst
