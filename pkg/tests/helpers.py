import numpy as np

from whilealive.data import EventDataset
from whilealive.simulator import get_scenario, simulate_dataset


def make(U, delta, Z=None, events=(), K=1, clusters=None, names=None):
    """Small dataset from follow-up, death indicators and ``(subject, type, time)`` events."""
    U = np.asarray(U, dtype=float)
    Z = np.zeros((U.size, 1)) if Z is None else np.asarray(Z, dtype=float).reshape(U.size, -1)
    es = [e[0] for e in events]
    et = [e[1] for e in events]
    tt = [e[2] for e in events]
    return EventDataset.from_arrays(Z, U, delta, es, et, tt, clusters=clusters, K=K, covariate_names=names)


def scenario_data(label="I(b)", n=300, seed=11, **over):
    return simulate_dataset(get_scenario(label, n=n, **over), seed)
