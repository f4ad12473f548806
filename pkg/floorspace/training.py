"""
Training - combined footprint/height loss, learning-rate schedule,
deterministic training loop, task-coefficient sweep and the
finite-difference gradient check.
"""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from .dataset import AUGMENT_POLICIES, BAND_SETS, AugmentParams, TileDataset, TileSet
from .errors import DatasetError, ShapeError, TrainingDivergedError, ValidationError
from .metrics import footprint_metrics
from .model import FloorspaceModel, ModelConfig, Trace

logger = logging.getLogger(__name__)

InputTransform = Callable[[torch.Tensor], torch.Tensor]

# Smooth-L1 transition in normalized height units: 1 m at the default 400 m scale
SMOOTH_L1_DELTA = 1.0 / 400.0


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 50
    epochs: int = 100
    footprint_weight: float = 0.1
    height_weight: float = 1.0
    height_task_coefficient_grid: Tuple[float, ...] = (0.05, 0.1, 0.2, 1.0, 10.0)
    smooth_l1_delta: float = SMOOTH_L1_DELTA
    batch_size: int = 8
    seed: int = 0
    band_set: str = "s1s2"
    augment: str = "none"
    augment_params: AugmentParams = AugmentParams()
    footprint_threshold: float = 0.5

    def __post_init__(self):
        if self.footprint_weight < 0 or self.height_weight < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.footprint_weight == 0 and self.height_weight == 0:
            raise ValidationError("at least one loss weight must be positive")
        if not all(c > 0 for c in self.height_task_coefficient_grid):
            raise ValidationError("task coefficients must be > 0")
        if not 0 <= self.lr_decay_epoch < self.epochs:
            raise ValidationError(f"lr_decay_epoch ({self.lr_decay_epoch}) must be < epochs ({self.epochs})")
        if self.lr_init <= 0 or self.lr_decay_factor <= 0 or self.smooth_l1_delta <= 0:
            raise ValidationError("lr_init, lr_decay_factor and smooth_l1_delta must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.band_set not in BAND_SETS:
            raise ValidationError(f"unknown band set {self.band_set!r}")
        if self.augment not in AUGMENT_POLICIES:
            raise ValidationError(f"unknown augmentation policy {self.augment!r}")


@dataclass
class LossTerms:
    total: torch.Tensor
    footprint: torch.Tensor
    height: torch.Tensor


def _check_binary(name: str, t: torch.Tensor):
    if not torch.all((t == 0) | (t == 1)):
        raise ValidationError(f"{name} must be binary")


def loss(
    fp_logits: Optional[torch.Tensor],
    h_pred: Optional[torch.Tensor],
    mask: torch.Tensor,
    h_target: torch.Tensor,
    validity: torch.Tensor,
    cfg: TrainConfig,
) -> LossTerms:
    """
    Weighted sum of footprint BCE and masked smooth-L1 height loss

    L_fp averages binary cross-entropy over valid pixels; L_h averages
    smooth-L1 over valid building pixels (0 when there are none). A missing
    head (single-task model) contributes 0.
    """
    _check_binary("mask", mask)
    _check_binary("validity", validity)
    for name, t in (("fp_logits", fp_logits), ("h_pred", h_pred), ("h_target", h_target), ("validity", validity)):
        if t is not None and t.shape != mask.shape:
            raise ShapeError(f"{name} shape {tuple(t.shape)} != mask shape {tuple(mask.shape)}")

    reference = fp_logits if fp_logits is not None else h_pred
    zero = reference.new_zeros(())

    l_fp = zero
    if fp_logits is not None:
        bce = F.binary_cross_entropy_with_logits(fp_logits, mask, reduction="none")
        n_valid = validity.sum()
        l_fp = (bce * validity).sum() / n_valid if n_valid > 0 else (fp_logits * 0).sum()

    l_h = zero
    if h_pred is not None:
        building = mask * validity
        n_building = building.sum()
        if n_building > 0:
            residual = F.smooth_l1_loss(h_pred, h_target, reduction="none", beta=cfg.smooth_l1_delta)
            l_h = (residual * building).sum() / n_building
        else:
            l_h = (h_pred * 0).sum()

    total = cfg.footprint_weight * l_fp + cfg.height_weight * l_h
    return LossTerms(total=total, footprint=l_fp, height=l_h)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr_init before lr_decay_epoch, lr_init * factor from it on"""
    return cfg.lr_init if epoch < cfg.lr_decay_epoch else cfg.lr_init * cfg.lr_decay_factor


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> Tuple[torch.optim.Adam, MultiStepLR]:
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(0.9, 0.999), eps=1e-8)
    scheduler = MultiStepLR(optimizer, milestones=[cfg.lr_decay_epoch], gamma=cfg.lr_decay_factor)
    return optimizer, scheduler


def scheduled_learning_rates(cfg: TrainConfig) -> List[float]:
    """Dry run of the optimizer schedule: the lr in effect for every epoch"""
    optimizer, scheduler = make_optimizer(torch.nn.Linear(1, 1), cfg)
    rates = []
    for _ in range(cfg.epochs):
        rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    return rates


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    train_fp: float
    train_h: float
    val_total: Optional[float]
    val_fp: Optional[float]
    val_h: Optional[float]
    val_dice: Optional[float]


@dataclass
class TrainResult:
    model: FloorspaceModel
    history: List[EpochRecord] = field(default_factory=list)


def _evaluate(
    model: FloorspaceModel,
    loader: DataLoader,
    cfg: TrainConfig,
    input_transform: Optional[InputTransform],
) -> Tuple[Optional[float], Optional[float], Optional[float], Optional[float]]:
    """Validation losses (tile-weighted means) and pooled Dice"""
    if len(loader.dataset) == 0:
        return None, None, None, None
    model.eval()
    sums = np.zeros(3)
    n_tiles = 0
    preds, refs, valids = [], [], []
    with torch.no_grad():
        for x, mask, h, valid in loader:
            if input_transform is not None:
                x = input_transform(x)
            fp, hp = model(x)
            terms = loss(fp, hp, mask, h, valid, cfg)
            sums += len(x) * np.array([terms.total.item(), terms.footprint.item(), terms.height.item()])
            n_tiles += len(x)
            if fp is not None:
                preds.append((torch.sigmoid(fp) >= cfg.footprint_threshold).numpy())
                refs.append(mask.numpy())
                valids.append(valid.numpy())
    model.train()
    total, l_fp, l_h = (sums / n_tiles).tolist()
    dice = None
    if preds:
        dice = footprint_metrics(np.concatenate(preds), np.concatenate(refs), np.concatenate(valids)).dice
    return total, l_fp, l_h, dice


def train(
    model: FloorspaceModel,
    tiles: TileSet,
    cfg: TrainConfig,
    input_transform: Optional[InputTransform] = None,
    progress: bool = True,
) -> TrainResult:
    """
    Train a model on a tile set

    Args:
        model: Freshly initialized (or resumed) model, trained in place
        tiles: Train/validation tiles (standardized)
        cfg: Optimization settings
        input_transform: Optional batch input builder (two-stage models)
        progress: Show a tqdm bar over epochs

    Returns:
        TrainResult with the model and one EpochRecord per epoch
    """
    if not tiles.train:
        raise DatasetError("training set is empty")
    torch.use_deterministic_algorithms(True, warn_only=True)

    train_set = TileDataset(tiles.train, cfg.band_set, cfg.augment, cfg.seed, cfg.augment_params)
    val_set = TileDataset(tiles.val, cfg.band_set)
    loader = DataLoader(
        train_set,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    val_loader = DataLoader(val_set, batch_size=cfg.batch_size, shuffle=False)
    optimizer, scheduler = make_optimizer(model, cfg)

    history = []
    model.train()
    bar = tqdm(range(cfg.epochs), desc="Training", disable=not progress)
    for epoch in bar:
        train_set.set_epoch(epoch)
        lr = optimizer.param_groups[0]["lr"]
        sums = np.zeros(3)
        steps = 0
        for step, (x, mask, h, valid) in enumerate(loader):
            if input_transform is not None:
                x = input_transform(x)
            fp, hp = model(x)
            terms = loss(fp, hp, mask, h, valid, cfg)
            if not torch.isfinite(terms.total):
                raise TrainingDivergedError(
                    f"non-finite loss {terms.total.item()} at epoch {epoch} step {step}"
                )
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            sums += [terms.total.item(), terms.footprint.item(), terms.height.item()]
            steps += 1
        scheduler.step()

        train_total, train_fp, train_h = (sums / steps).tolist()
        val_total, val_fp, val_h, val_dice = _evaluate(model, val_loader, cfg, input_transform)
        history.append(EpochRecord(epoch, lr, train_total, train_fp, train_h, val_total, val_fp, val_h, val_dice))
        bar.set_postfix(loss=f"{train_total:.4f}", dice="-" if val_dice is None else f"{val_dice:.3f}")
        logger.debug("epoch %d lr %.2e train %.5f val %s dice %s", epoch, lr, train_total, val_total, val_dice)

    return TrainResult(model=model, history=history)


def write_history_csv(history: Sequence[EpochRecord], path: Union[str, Path]):
    """One CSV row per epoch; undefined validation values are written as null"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [f.name for f in fields(EpochRecord)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for record in history:
            writer.writerow(["null" if v is None else repr(v) for v in asdict(record).values()])


@dataclass
class SweepEntry:
    coefficient: float
    history: List[EpochRecord]
    val_dice: Optional[float]
    val_h: Optional[float]
    model: FloorspaceModel


def sweep_task_coefficients(
    tiles: TileSet,
    model_config: ModelConfig,
    cfg: TrainConfig,
    model_seed: int = 0,
    progress: bool = True,
) -> Tuple[List[SweepEntry], int]:
    """
    Train one fresh model per height-task coefficient

    Returns:
        (entries, index of the best entry): best = highest final validation
        Dice, ties broken by lower validation height loss
    """
    entries = []
    for coefficient in cfg.height_task_coefficient_grid:
        logger.info("sweep: height task coefficient %g", coefficient)
        model = FloorspaceModel(model_config, seed=model_seed)
        result = train(model, tiles, replace(cfg, height_weight=coefficient), progress=progress)
        last = result.history[-1]
        entries.append(SweepEntry(coefficient, result.history, last.val_dice, last.val_h, result.model))

    def rank(i: int) -> Tuple[float, float]:
        e = entries[i]
        dice = -math.inf if e.val_dice is None else e.val_dice
        h = math.inf if e.val_h is None else e.val_h
        return (-dice, h)

    return entries, min(range(len(entries)), key=rank)


# Gradient check ------------------------------------------------------------

Objective = Callable[[Trace], torch.Tensor]

# A kinked entry is retried at step / 10, step / 100, ... this many times
STEP_REFINEMENTS = 3


@dataclass
class GroupCheck:
    """Finite-difference comparison for one named parameter tensor"""
    max_rel_error: float
    checked: int
    skipped: int  # entries whose +/- step crossed a ReLU or max-pool kink at every step tried
    required: int  # min(samples, numel)
    refined: int = 0  # entries checked only after shrinking the step

    @property
    def complete(self) -> bool:
        return self.checked >= self.required


@dataclass
class GradientCheckReport:
    groups: Dict[str, GroupCheck]

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups.values()), default=0.0)

    def failures(self, tolerance: float) -> Dict[str, str]:
        """Reason per failing group: too few entries checked, or error at/above tolerance"""
        reasons = {}
        for name, group in sorted(self.groups.items()):
            if not group.complete:
                reasons[name] = (
                    f"only {group.checked} of {group.required} entries checked ({group.skipped} kinked at every step)"
                )
            elif group.max_rel_error >= tolerance:
                reasons[name] = f"relative error {group.max_rel_error:.3e} >= {tolerance:g}"
        return reasons

    def passed(self, tolerance: float) -> bool:
        return not self.failures(tolerance)


def analytic_gradients(objective: Objective, params: Dict[str, torch.nn.Parameter]) -> Dict[str, torch.Tensor]:
    """Autograd gradient of the objective for every named parameter"""
    for p in params.values():
        p.grad = None
    objective(None).backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }


def _same_trace(a: List[torch.Tensor], b: List[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def check_gradients(
    objective: Objective,
    params: Dict[str, torch.nn.Parameter],
    step: float = 1e-3,
    samples: int = 32,
    seed: int = 0,
) -> GradientCheckReport:
    """
    Compare autograd gradients with central finite differences

    Entries of each parameter tensor are visited in random order and
    perturbed by +/- step until `samples` of them (or all, for smaller
    tensors) have been checked. Relative error is
    |g_an - g_fd| / max(|g_an|, |g_fd|, 1e-8). An entry whose perturbation
    changes the activation pattern recorded in the trace is retried with
    the step divided by 10, up to STEP_REFINEMENTS times, and skipped if
    every step crosses a kink. A group that ends with fewer checked
    entries than required is reported as incomplete.
    """
    analytic = analytic_gradients(objective, params)
    rng = np.random.default_rng(seed)
    steps = [step / 10 ** k for k in range(STEP_REFINEMENTS + 1)]

    def evaluate() -> Tuple[float, List[torch.Tensor]]:
        trace: List[torch.Tensor] = []
        with torch.no_grad():
            value = objective(trace).item()
        return value, trace

    _, base_trace = evaluate()

    def central_difference(flat: torch.Tensor, index: int) -> Optional[Tuple[float, int]]:
        original = flat[index].item()
        try:
            for attempt, h in enumerate(steps):
                flat[index] = original + h
                plus, plus_trace = evaluate()
                flat[index] = original - h
                minus, minus_trace = evaluate()
                if _same_trace(base_trace, plus_trace) and _same_trace(base_trace, minus_trace):
                    return (plus - minus) / (2 * h), attempt
        finally:
            flat[index] = original
        return None

    groups = {}
    for name, param in params.items():
        flat = param.data.view(-1)
        required = min(samples, flat.numel())
        worst, checked, skipped, refined = 0.0, 0, 0, 0
        for index in rng.permutation(flat.numel()):
            if checked >= required:
                break
            result = central_difference(flat, int(index))
            if result is None:
                skipped += 1
                continue
            numeric, attempt = result
            exact = analytic[name].view(-1)[index].item()
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8))
            checked += 1
            refined += attempt > 0
        groups[name] = GroupCheck(max_rel_error=worst, checked=checked, skipped=skipped, required=required,
                                  refined=refined)
        if checked < required:
            logger.warning("gradient check: %s has %d of %d entries checked", name, checked, required)
    return GradientCheckReport(groups=groups)


def random_batch(config: ModelConfig, batch: int = 2, size: int = 16, seed: int = 0) -> Tuple[torch.Tensor, ...]:
    """Random float64 (input, mask, height, validity) batch for gradient checks"""
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, config.in_channels, size, size, generator=g, dtype=torch.float64)
    mask = (torch.rand(batch, 1, size, size, generator=g, dtype=torch.float64) < 0.5).double()
    height = torch.rand(batch, 1, size, size, generator=g, dtype=torch.float64) * 0.2 * mask
    validity = torch.ones_like(mask)
    return x, mask, height, validity


def gradient_check(
    model: FloorspaceModel,
    batch: Sequence[torch.Tensor],
    cfg: TrainConfig,
    step: float = 1e-3,
    samples: int = 32,
    seed: int = 0,
) -> GradientCheckReport:
    """
    Finite-difference check of the full multi-task loss in float64

    The model is copied and promoted to float64; the caller's model is
    left untouched. The trace also records which side of the smooth-L1
    transition each height residual falls on.
    """
    twin = copy.deepcopy(model).double()
    x, mask, height, validity = (t.double() for t in batch)

    def objective(trace: Trace) -> torch.Tensor:
        fp, hp = twin(x, trace)
        if trace is not None and hp is not None:
            trace.append((hp - height).abs() < cfg.smooth_l1_delta)
        return loss(fp, hp, mask, height, validity, cfg).total

    report = check_gradients(objective, dict(twin.named_parameters()), step, samples, seed)
    logger.info("gradient check: max relative error %.3e over %d groups", report.max_rel_error, len(report.groups))
    return report


def iter_parameter_groups(report: GradientCheckReport) -> Iterable[Tuple[str, GroupCheck]]:
    return sorted(report.groups.items())
