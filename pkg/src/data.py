"""Synthetic non-IID classification clients and seed streams."""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.errors import ConfigError
from src.models import SyntheticTaskSpec

logger = logging.getLogger(__name__)

# Seed stream purposes. A stream is identified by (run seed, purpose, *indices),
# so adding clients or rounds never shifts the numbers drawn by existing streams.
STREAM_INIT = 0
STREAM_TASK = 1
STREAM_CLIENT_DATA = 2
STREAM_TEST_DATA = 3
STREAM_SHUFFLE = 4
STREAM_RANDOM_DROP = 5
STREAM_BUDGET = 6


def seed_stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream `path` under run seed `seed`."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(path)))


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    preferred: Tuple[int, ...]

    @property
    def sample_count(self) -> int:
        return int(self.y.shape[0])


def preferred_classes(client: int, clients: int, num_classes: int) -> Tuple[int, ...]:
    """Class family a client over-samples; families are disjoint when clients <= classes."""
    if clients <= num_classes:
        return tuple(k for k in range(num_classes) if k % clients == client)
    return (client % num_classes,)


def _centres(spec: SyntheticTaskSpec, seed: int) -> np.ndarray:
    rng = seed_stream(seed, STREAM_TASK)
    return rng.normal(0.0, spec.cluster_spread, size=(spec.num_classes, spec.clusters_per_client, spec.input_dim))


def _draw(spec: SyntheticTaskSpec, centres: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    modes = rng.integers(spec.clusters_per_client, size=n)
    base = centres[labels, modes]
    if spec.tokens_per_sample > 1:
        noise = rng.normal(0.0, spec.noise_std, size=(n, spec.tokens_per_sample, spec.input_dim))
        return base[:, None, :] + noise
    return base + rng.normal(0.0, spec.noise_std, size=(n, spec.input_dim))


def generate_clients(spec: SyntheticTaskSpec, clients: int, seed: int) -> List[ClientDataset]:
    """One dataset per client; `label_skew` of each client's labels come from its class family."""
    if spec.label_skew == 1.0 and clients > spec.num_classes:
        raise ConfigError(
            f"label_skew=1 needs clients <= num_classes, got {clients} > {spec.num_classes}"
        )
    n_test = int(round(spec.samples_per_client * spec.test_fraction))
    if spec.samples_per_client - n_test < 1:
        raise ConfigError("test_fraction leaves no training samples")
    centres = _centres(spec, seed)
    datasets = []
    for c in range(clients):
        rng = seed_stream(seed, STREAM_CLIENT_DATA, c)
        preferred = np.array(preferred_classes(c, clients, spec.num_classes))
        n = spec.samples_per_client
        from_family = rng.random(n) < spec.label_skew
        labels = np.where(
            from_family,
            preferred[rng.integers(preferred.shape[0], size=n)],
            rng.integers(spec.num_classes, size=n),
        )
        x = _draw(spec, centres, labels, rng)
        split = n - n_test
        datasets.append(ClientDataset(
            client_id=c,
            x=x[:split], y=labels[:split],
            test_x=x[split:], test_y=labels[split:],
            preferred=tuple(int(k) for k in preferred),
        ))
        logger.debug(f"client {c}: {split} train / {n_test} test samples, family {tuple(preferred)}")
    return datasets


def generate_test_set(spec: SyntheticTaskSpec, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Held-out IID test set with balanced classes."""
    rng = seed_stream(seed, STREAM_TEST_DATA)
    labels = rng.permutation(np.arange(spec.global_test_samples) % spec.num_classes)
    return _draw(spec, _centres(spec, seed), labels, rng), labels
