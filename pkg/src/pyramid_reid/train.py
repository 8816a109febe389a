"""Training orchestration: epoch loop, schedule, logging, checkpoints.

Determinism contract: with a fixed seed the batch order, augmentation draws
and parameter trajectory are reproducible, and resuming from an epoch
checkpoint continues the exact same trajectory (all per-epoch randomness is
derived from (seed, epoch) rather than carried state).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import PatchPool, augment
from .config import ExperimentConfig, config_to_dict
from .evaluation import images_to_tensor
from .datasets import load_image
from .losses import NumericalError, total_loss
from .model import ReidModel, load_checkpoint, save_checkpoint
from .regularization import concat_gram, eig_extremes
from .sampler import pk_batches
from .schedule import lr_at

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, last_checkpoint):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    final_checkpoint: str
    log_path: str
    last_loss: float
    epochs_run: int


def _label_mapping(entries):
    pids = sorted({e.pid for e in entries})
    return {pid: i for i, pid in enumerate(pids)}


def _load_batch(entries, cfg: ExperimentConfig, rng, patch_pool, training):
    images = []
    for entry in entries:
        img = load_image(entry.path, cfg.data.input_size)
        if training:
            img = augment(img, cfg.train.augment, rng,
                          pixel_mean=cfg.data.pixel_mean, patch_pool=patch_pool)
        images.append(np.ascontiguousarray(img))
    return images_to_tensor(images, cfg.data.pixel_mean, cfg.data.pixel_std)


def train(model: ReidModel, train_entries, cfg: ExperimentConfig, out_dir,
          resume_from=None, device="cpu") -> TrainResult:
    cfg.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    tcfg = cfg.train
    label_of = _label_mapping(train_entries)
    if model.num_identities is not None and model.num_identities != len(label_of):
        raise ValueError(
            f"model was built for {model.num_identities} identities, "
            f"dataset has {len(label_of)}"
        )
    model.to(device)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=lr_at(0, tcfg), weight_decay=tcfg.weight_decay)

    start_epoch = 0
    global_step = 0
    last_ckpt = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from, model=model, optimizer=optimizer)
        start_epoch = payload["epoch"] + 1
        global_step = payload["step"]
        last_ckpt = str(resume_from)
        if payload.get("rng_state") is not None:
            torch.set_rng_state(torch.as_tensor(payload["rng_state"], dtype=torch.uint8))
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)

    def write_checkpoint(path, epoch):
        save_checkpoint(
            path, model, optimizer, epoch=epoch, step=global_step,
            config_echo=config_to_dict(cfg), rng_state=torch.get_rng_state(),
        )

    log_mode = "a" if resume_from is not None else "w"
    cor_on = cfg.regularization.enabled and model.pyramid is not None
    last_total = float("nan")
    with open(log_path, log_mode) as log_fh:
        for epoch in range(start_epoch, tcfg.epochs):
            model.train()
            lr = lr_at(epoch, tcfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            sampler_rng = np.random.default_rng([tcfg.seed, epoch])
            labels_all = [label_of[e.pid] for e in train_entries]
            batches = pk_batches(labels_all, tcfg.identities_per_batch,
                                 tcfg.instances_per_identity, sampler_rng)
            patch_pool = PatchPool(tcfg.augment.patch_pool_size)
            for bi, batch_idx in enumerate(batches):
                rng = np.random.default_rng([tcfg.seed, epoch, bi])
                entries = [train_entries[i] for i in batch_idx]
                images = _load_batch(entries, cfg, rng, patch_pool, training=True).to(device)
                labels = torch.tensor([label_of[e.pid] for e in entries], device=device)

                outputs = model(images)
                cor_value = None
                lam_max = lam_min = None
                if model.pyramid is not None and outputs.lateral_map is not None:
                    if cor_on:
                        gram = concat_gram(outputs.stage2_map, outputs.lateral_map,
                                           cfg.regularization)
                        lmax, lmin = eig_extremes(gram, cfg.regularization)
                        cor_value = cfg.regularization.beta * (lmax - lmin) ** 2
                        lam_max, lam_min = float(lmax), float(lmin)
                    else:
                        with torch.no_grad():
                            gram = concat_gram(outputs.stage2_map, outputs.lateral_map,
                                               cfg.regularization)
                            lmax, lmin = eig_extremes(gram, cfg.regularization)
                            lam_max, lam_min = float(lmax), float(lmin)

                try:
                    loss, breakdown = total_loss(outputs, labels, cor_value, cfg.loss)
                except NumericalError as exc:
                    raise TrainingAborted(
                        f"aborting at epoch {epoch} step {global_step}: {exc} "
                        f"(last good checkpoint: {last_ckpt})", last_ckpt) from exc
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                global_step += 1
                last_total = float(loss)

                if global_step % tcfg.log_interval == 0:
                    record = {
                        "epoch": epoch, "step": global_step, "lr": lr,
                        "loss_total": float(breakdown["total"]),
                        "loss_triplet": float(breakdown["triplet"]),
                        "loss_ce_global": float(breakdown["ce_global"]),
                        "loss_ce_parts": [
                            float(breakdown[f"ce_part_{n}"])
                            for n in range(len(outputs.part_logits))
                        ],
                        "loss_cor": float(cor_value) if cor_value is not None else None,
                        "lambda_max": lam_max, "lambda_min": lam_min,
                    }
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()

            if (epoch + 1) % tcfg.checkpoint_interval == 0 and epoch + 1 < tcfg.epochs:
                path = ckpt_dir / f"epoch_{epoch:04d}.pt"
                write_checkpoint(path, epoch)
                last_ckpt = str(path)

        final_path = ckpt_dir / "final.pt"
        write_checkpoint(final_path, tcfg.epochs - 1)
    return TrainResult(str(final_path), str(log_path), last_total, tcfg.epochs - start_epoch)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
