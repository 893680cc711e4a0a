"""Compare the three ways of pooling the per-frame ego features over time.

Each fusion mode trains its own stage 2 from one shared stage-1 checkpoint,
so the only difference between the rows is the temporal pooling.

    python3 demos/fusion_ablation.py
"""

from egointeract.config import TrainConfig
from egointeract.model import prepare_clip
from egointeract.synthetic import make_dataset
from egointeract.train import evaluate, train_stage1, train_stage2


def main():
    train, ev, _ = make_dataset(200, 60, seed=2)
    s1 = TrainConfig(stage=1, iterations=400)
    tr = [prepare_clip(c, s1) for c in train.clips()]
    te = [prepare_clip(c, s1) for c in ev.clips()]
    base = train_stage1(s1, tr)
    print(f"{'stage 1':<8}", "  ".join(f"{h} {v:.3f}" for h, v in evaluate(base.model, te).mAP.items()))
    for fusion in ("max", "avg", "mlp"):
        cfg = TrainConfig(stage=2, lr=2e-4, iterations=600, fusion=fusion)
        rep = evaluate(train_stage2(cfg, tr, base.checkpoint).model, te)
        print(f"{fusion:<8}", "  ".join(f"{h} {v:.3f}" for h, v in rep.mAP.items()))


if __name__ == "__main__":
    main()
