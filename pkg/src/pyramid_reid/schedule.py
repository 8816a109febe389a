"""Learning-rate schedule: per-epoch linear warmup then step decays."""

from .config import TrainConfig


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    passed = sum(1 for d in cfg.decay_epochs if epoch >= d)
    if passed == 0:
        return cfg.base_lr
    # Divide by the inverse factor: decimal rates like 0.1 then stay exact.
    return cfg.base_lr / (1.0 / cfg.decay_factor) ** passed
