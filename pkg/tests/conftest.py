"""Shared fixtures: toy graphs, the default dataset, and cached training runs.

The acceptance criteria need 35 full training runs (modes x loss variants x
modalities x 5 seeds).  They are independent, so a session fixture builds
them once through a two-process pool; each worker regenerates its own data
and bank deterministically from the run key.
"""

import multiprocessing

import numpy as np
import pytest

from skelalign.data import SyntheticSpec, derive_modality, generate_synthetic
from skelalign.encoder import build_model
from skelalign.evaluate import score_model
from skelalign.graph import build_partition, build_skeleton
from skelalign.textbank import HashedEmbedder, build_bank
from skelalign.train import TrainConfig, rng_stream, train

SEEDS = (1, 2, 3, 4, 5)

# (mode, loss_variant, modality, seed) for every acceptance-relevant run.
RUN_KEYS = (
    [("baseline", "kld", "joint", s) for s in SEEDS]
    + [("gap", v, "joint", s) for v in ("kld", "cl", "jsd") for s in SEEDS]
    + [("gap", "kld", m, s) for m in ("bone", "joint_motion", "bone_motion") for s in SEEDS]
)


@pytest.fixture(scope="session")
def toy_graph():
    return build_skeleton("toy10")


@pytest.fixture(scope="session")
def four_part(toy_graph):
    return build_partition("four_part", toy_graph)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def default_bank(default_dataset, four_part):
    return build_bank(default_dataset.corpus, four_part, "synonym_plus_parts",
                      HashedEmbedder(256))


def run_experiment(key):
    """One full default-spec training run; pure function of the key."""
    mode, variant, modality, seed = key
    dataset = generate_synthetic(SyntheticSpec())
    graph = build_skeleton("toy10")
    partition = build_partition("four_part", graph)
    bank = None
    if mode == "gap":
        bank = build_bank(dataset.corpus, partition, "synonym_plus_parts",
                          HashedEmbedder(256))
    train_batch = derive_modality(dataset.train, modality, graph)
    test_batch = derive_modality(dataset.test, modality, graph)
    config = TrainConfig(mode=mode, loss_variant=variant, seed=seed)
    model = build_model(graph, partition, num_classes=6, head_dim=256,
                        rng=rng_stream(seed, "init"))
    model, report = train(train_batch, model, config, bank=bank, test_batch=test_batch)
    table = score_model(model, test_batch, modality=modality)
    return {
        "key": key,
        "best_train_acc": max(report.epoch_acc),
        "final_train_acc": report.final_train_acc,
        "final_test_acc": report.final_test_acc,
        "epoch_loss": list(report.epoch_loss),
        "wall_time_s": report.wall_time_s,
        "scores": table.scores,
        "labels": table.labels,
    }


@pytest.fixture(scope="session")
def experiment_cache():
    with multiprocessing.Pool(2) as pool:
        results = pool.map(run_experiment, RUN_KEYS)
    return {r["key"]: r for r in results}


def cache_select(cache, mode=None, variant=None, modality=None):
    out = {}
    for (m, v, mod, seed), r in cache.items():
        if (mode is None or m == mode) and (variant is None or v == variant) \
                and (modality is None or mod == modality):
            out[seed] = r
    return dict(sorted(out.items()))


def mean_test_acc(runs: dict) -> float:
    return float(np.mean([r["final_test_acc"] for r in runs.values()]))
