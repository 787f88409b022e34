import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from errors import ConfigError

THREADS_ENV = "CERTVOTE_THREADS"

logger = logging.getLogger(__name__)


def worker_count():
    value = os.environ.get(THREADS_ENV, "").strip()
    if not value:
        return 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} invalide : {value!r}")
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} doit être >= 1 (reçu {count})")
    return count


def derive_seed(root, *keys):
    """Graine 64 bits dérivée de (root, *keys), indépendante de l'ordonnancement."""
    sequence = np.random.SeedSequence([int(root), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def stream(seed, *keys):
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def ordered_map(fn, items, workers=None):
    """map() qui garde l'ordre des entrées, sur le pool borné par CERTVOTE_THREADS."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug("pool de %d workers pour %d tâches", workers, len(items))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
