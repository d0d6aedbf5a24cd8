import copy

import pytest

# digits-sized data, everything else shrunk so a full pipeline runs in seconds
TINY = {
    "sgd": {"n_iterations": 150},
    "dropout": {"n_iterations": 150},
    "sampler": {"burn_in": 10, "thin_interval": 2, "total_samples": 30},
    "gan": {"latent_dim": 4, "hidden": [16], "n_steps": 6, "batch_size": 16},
    "gan_compare": {"checkpoint_every": 3, "T": 10},
    "mog": {"components": [1, 2], "max_iters": 20, "T": 10},
    "anomaly": {"T": 10, "T_sweep": [5, 10], "ood_count": 50},
    "attack": {"count": 20, "T": 10, "pgd_iterations": 3},
    "active": {
        "methods": ["sgd"], "rounds": 2, "T": 5, "sgd_iterations": 50,
        "burn_in": 5, "thin_interval": 1, "total_samples": 5, "gan_steps": 2,
    },
    "toy2d": {"sgd_iterations": 100, "thin_interval": 1, "gan_steps": 4, "grid_resolution": 7, "ring_points": 12, "T": 5},
}


@pytest.fixture
def tiny():
    return copy.deepcopy(TINY)
