"""Identity-balanced batch sampling: P distinct identities x K instances."""

from collections import defaultdict

import numpy as np


def _epoch_length(num_images, num_ids, p, k):
    # Enough iterations to cycle the whole image set once, and never fewer
    # than it takes to visit every identity.
    return max(int(np.ceil(num_images / (p * k))), int(np.ceil(num_ids / p)))


def pk_batches(labels, identities_per_batch, instances_per_identity, rng):
    """One epoch of P x K batches over dataset indices.

    Every batch holds exactly P distinct identities with K instances each
    (instances redrawn with replacement when an identity has fewer than K
    images); every identity appears at least once per epoch. Deterministic
    given the generator state.
    """
    p, k = identities_per_batch, instances_per_identity
    by_id = defaultdict(list)
    for idx, pid in enumerate(labels):
        by_id[int(pid)].append(idx)
    ids = sorted(by_id)
    if len(ids) < p:
        raise ValueError(f"dataset has {len(ids)} identities, need at least {p}")

    id_queue = []
    image_queues = {pid: [] for pid in ids}

    def next_ids():
        nonlocal id_queue
        picked = []
        while len(picked) < p:
            if not id_queue:
                id_queue = list(rng.permutation(ids))
            candidate = id_queue.pop()
            if candidate not in picked:
                picked.append(candidate)
        return picked

    def next_instances(pid):
        pool = by_id[pid]
        if len(pool) < k:
            return list(rng.choice(pool, size=k, replace=True))
        queue = image_queues[pid]
        taken = []
        while len(taken) < k:
            if not queue:
                queue[:] = list(rng.permutation(pool))
            taken.append(queue.pop())
        return taken

    batches = []
    for _ in range(_epoch_length(len(labels), len(ids), p, k)):
        batch = []
        for pid in next_ids():
            batch.extend(next_instances(pid))
        batches.append(batch)
    return batches
