"""Labelled random sub-streams derived from one master seed per replication."""
import numpy as np

LABELS = {"design": 0, "noise": 1, "chain": 2, "predict": 3}


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one component of a replication."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(LABELS[label],)))
