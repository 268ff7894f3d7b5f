import numpy as np
import pytest

from langskill.corpus import EnrichedTrajectory, Trajectory
from langskill.nets import NetConfig
from langskill.variational import TrainConfig, train

# shrunken architecture for fast tests; heads/width ratios preserved
TINY_NET = dict(
    obs_shape=(7, 7, 3),
    n_actions=6,
    d_modality=16,
    d_model=32,
    n_layers=2,
    n_heads=4,
    d_ff=64,
    lang_buckets=32,
    max_len=64,
)


def two_skill_corpus(n=48, segments=4, seg_len=5, seed=0):
    """Demonstrations stitched from two scripted behaviors that strictly
    alternate: 'walk' repeats move-forward, 'spin' repeats turn-left."""
    out = []
    for i in range(n):
        order = [(i + j) % 2 for j in range(segments)]
        actions, annotations, beta_bar = [], [], []
        for b in order:
            actions += [2 if b == 0 else 0] * seg_len
            annotations += (["walk ahead"] if b == 0 else ["spin in place"]) * seg_len
            beta_bar += [1] + [0] * (seg_len - 1)
        t = len(actions)
        traj = Trajectory(
            "alternate between walking and spinning",
            np.zeros((t, 7, 7, 3), dtype=np.int64),
            np.asarray(actions, dtype=np.int64),
        )
        out.append(EnrichedTrajectory(traj, np.asarray(beta_bar), annotations))
    return out


@pytest.fixture(scope="session")
def two_skill_run():
    corpus = two_skill_corpus(48)
    train_set, held_out = corpus[:40], corpus[40:]
    cfg = TrainConfig(
        mdl_weight=0.01,
        n_skills=4,
        total_epochs=30,
        warmup_epochs=3,
        batch_size=8,
        seed=1,
    )
    net_cfg = NetConfig(n_skills=4, **TINY_NET)
    result = train(train_set, cfg, net_cfg)
    return result, train_set, held_out
