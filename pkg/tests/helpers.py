from config import from_dict
from data.sample_data import generate_volume
from data.volumes import normalize_intensity


def make_config(channels=(8, 8, 8, 8, 8), **train):
    """Small CPU-friendly run config; ``train`` overrides the [train] section."""
    train_section = {"epochs": 2, "batch_size": 2, "lr0": 1e-3, "seed": 0}
    train_section.update(train)
    return from_dict(
        {
            "model": {"channels": list(channels)},
            "train": train_section,
            "augment": {"enabled": False},
        }
    )


def synthetic_volume(volume_id="vol_a", n_slices=4, size=64, seed=42):
    return normalize_intensity(generate_volume(volume_id, n_slices=n_slices, size=size, seed=seed))
