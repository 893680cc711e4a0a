"""Look inside the ego-thing and ego-stuff affinities of one clip.

A briefly trained stage-2 model is applied to a fresh clip with a crossing
pedestrian. For a frame where the pedestrian is inside the spatial gate we
print the ego row of both affinity matrices: who the ego node listens to, and
who is cut off by distance.

    python3 demos/inspect_affinity.py
"""

import numpy as np

from egointeract.config import TrainConfig
from egointeract.model import frame_block, prepare_clip
from egointeract.synthetic import SceneSpec, generate_clip, make_dataset
from egointeract.train import train_stage1, train_stage2


def main():
    s1 = TrainConfig(stage=1, iterations=300)
    s2 = TrainConfig(stage=2, lr=2e-4, iterations=300)
    train, _, _ = make_dataset(120, 0, seed=1)
    tr = [prepare_clip(c, s1) for c in train.clips()]
    model = train_stage2(s2, tr, train_stage1(s1, tr).checkpoint).model

    clip = generate_clip(SceneSpec(goal="merge", cause="stop_for_crossing_pedestrian", seed=3))
    cg = prepare_clip(clip, s2)
    print("clip labels:", {h: s2.heads[h][k] for h, k in cg.labels.items()})
    # the planted pedestrian and the planted merge region enter their gates at different times
    t = int(np.argmax(cg.causal_near))
    print(f"\nframe {t}: causal pedestrian within the thing gate")

    nodes = cg.thing_nodes[t]
    G = frame_block(model.thing_affinity(cg), cg.thing_rows, t)
    ego = nodes.locations[-1]
    print("ego-thing row (gate mu = %.1f)" % s2.mu_thing)
    for i, kind in enumerate(nodes.kinds):
        d = float(np.linalg.norm(nodes.locations[i] - ego))
        tag = "  <- causal" if i == cg.causal_node(t) else ""
        print(f"  {i:>2} {kind:<8} dist {d:5.2f}  weight {G[-1, i]:.3f}{tag}")

    t = next(t for t in range(cg.T) if min(cg.stuff_dists[t]) <= s2.mu_stuff)
    print(f"\nframe {t}: a stuff region within the stuff gate")
    S = frame_block(model.stuff_affinity(cg), cg.stuff_rows, t)
    print("ego-stuff row (gate mu = %.1f); stuff rows themselves are identity" % s2.mu_stuff)
    for i, kind in enumerate(cg.stuff_nodes[t].kinds[:-1]):
        print(f"  {i:>2} {kind:<15} nearest {cg.stuff_dists[t][i]:5.2f}  weight {S[-1, i]:.3f}")
    print(f"  {len(cg.stuff_dists[t]):>2} ego (self)                   weight {S[-1, -1]:.3f}")


if __name__ == "__main__":
    main()
