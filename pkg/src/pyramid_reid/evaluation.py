"""Retrieval evaluation: features, distances, mAP and CMC.

Protocol: gallery entries sharing both identity and camera with the query
are invalid, junk entries (pid == -1) are always invalid, queries without a
single valid positive are skipped, distance ties break by gallery order.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import load_image

log = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    mean_ap: float
    cmc: np.ndarray                 # cmc[k-1] = CMC at rank k
    per_query_ap: list              # None for skipped queries
    num_valid_queries: int
    ranked_indices: list = field(default_factory=list, repr=False)

    def cmc_at(self, rank):
        return float(self.cmc[rank - 1])

    def report_dict(self, per_query=False):
        out = {
            "mAP": self.mean_ap,
            "rank_1": self.cmc_at(1),
            "rank_5": self.cmc_at(min(5, len(self.cmc))),
            "rank_10": self.cmc_at(min(10, len(self.cmc))),
            "valid_queries": self.num_valid_queries,
        }
        if per_query:
            out["per_query_ap"] = self.per_query_ap
        return out


def images_to_tensor(images, pixel_mean, pixel_std):
    """Stack HWC float images into a normalised BxCxHxW tensor."""
    arr = np.stack(images).astype(np.float32)
    arr = (arr - np.asarray(pixel_mean, np.float32)) / np.asarray(pixel_std, np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def extract_features(model, entries, input_hw, pixel_mean, pixel_std, batch_size=32):
    """Inference features for a list of dataset entries.

    Returns (features n x D float32, pids, camids, kept_entries); files that
    fail to decode are reported and skipped rather than aborting the run.
    """
    model.eval()
    feats, kept = [], []
    batch = []
    with torch.no_grad():
        for entry in entries:
            try:
                batch.append(load_image(entry.path, input_hw))
                kept.append(entry)
            except OSError as exc:
                log.error("failed to decode %s: %s", entry.path, exc)
                continue
            if len(batch) == batch_size:
                feats.append(model.inference_features(images_to_tensor(batch, pixel_mean, pixel_std)))
                batch = []
        if batch:
            feats.append(model.inference_features(images_to_tensor(batch, pixel_mean, pixel_std)))
    features = torch.cat(feats).cpu().numpy() if feats else np.zeros((0, model.feature_dim), np.float32)
    pids = np.array([e.pid for e in kept], dtype=np.int64)
    camids = np.array([e.camid for e in kept], dtype=np.int64)
    return features, pids, camids, kept


def distance_matrix(query_feats, gallery_feats):
    """Squared Euclidean distances between row-normalised feature sets."""
    q = np.asarray(query_feats)
    g = np.asarray(gallery_feats)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    sq_q = (q ** 2).sum(axis=1)[:, None]
    sq_g = (g ** 2).sum(axis=1)[None, :]
    return np.maximum(sq_q + sq_g - 2.0 * q @ g.T, 0.0)


def evaluate_ranking(dist, q_pids, q_camids, g_pids, g_camids, max_rank=10) -> RetrievalResult:
    dist = np.asarray(dist)
    nq, ng = dist.shape
    if (len(q_pids), len(g_pids)) != (nq, ng) or (len(q_camids), len(g_camids)) != (nq, ng):
        raise ValueError("label arrays do not match distance matrix axes")
    q_pids, q_camids = np.asarray(q_pids), np.asarray(q_camids)
    g_pids, g_camids = np.asarray(g_pids), np.asarray(g_camids)
    max_rank = min(max_rank, ng)

    cmc_hits = np.zeros(max_rank)
    per_query_ap = []
    ranked_all = []
    valid_queries = 0
    for qi in range(nq):
        order = np.argsort(dist[qi], kind="stable")
        valid = ~((g_pids[order] == q_pids[qi]) & (g_camids[order] == q_camids[qi]))
        valid &= g_pids[order] != -1
        ranked = order[valid]
        ranked_all.append(ranked)
        matches = g_pids[ranked] == q_pids[qi]
        if not matches.any():
            per_query_ap.append(None)
            continue
        valid_queries += 1
        hit_ranks = np.flatnonzero(matches)
        precisions = (np.arange(len(hit_ranks)) + 1) / (hit_ranks + 1)
        per_query_ap.append(float(precisions.mean()))
        first = hit_ranks[0]
        if first < max_rank:
            cmc_hits[first:] += 1
    if valid_queries == 0:
        raise ValueError("no query has a valid gallery positive")
    aps = [ap for ap in per_query_ap if ap is not None]
    return RetrievalResult(
        mean_ap=float(np.mean(aps)),
        cmc=cmc_hits / valid_queries,
        per_query_ap=per_query_ap,
        num_valid_queries=valid_queries,
        ranked_indices=ranked_all,
    )


def write_report(result: RetrievalResult, path, per_query=False):
    with open(path, "w") as fh:
        json.dump(result.report_dict(per_query=per_query), fh, indent=2)
