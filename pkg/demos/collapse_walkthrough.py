"""Watch a weak modality disappear as more modalities are fused.

Trains a vanilla fusion model for m = 2..5 on the synthetic desk problem and
prints, per m, the collision bound, the measured fraction of polysemantic
fusion neurons and how well the weakest modality's encoder still predicts
the label on its own.

    python3 demos/collapse_walkthrough.py --epochs 100
"""

import argparse

import numpy as np

from mmcollapse.diagnostics import collision_bound, empirical_collision_fraction
from mmcollapse.fusionmodel import encode, predict
from mmcollapse.harness import initial_model
from mmcollapse.probes import fit_logistic, logistic_predict
from mmcollapse.synthgen import desk_dataset
from mmcollapse.trainers import TrainConfig, train, weakest_modality


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--n-train", type=int, default=2000)
    args = ap.parse_args()

    cfg = TrainConfig(mode="vanilla", epochs=args.epochs, seed=args.seed)
    print(f"{'m':>2} {'bound':>7} {'collide':>8} {'test acc':>9} {'weak probe acc':>15}")
    for m in range(2, 6):
        tr, te = desk_dataset(m, args.seed, n_train=args.n_train, n_test=500)
        model, _ = train(initial_model(tr, args.seed, "vanilla"), tr, cfg)
        acc = np.mean(predict(model, te.modalities) == te.labels)

        # how much label information the weak encoder kept inside the fused model
        weak = weakest_modality(tr, cfg)
        probe = fit_logistic(encode(model, tr.modalities)[weak], tr.labels, tr.num_classes)
        weak_pred = logistic_predict(probe, encode(model, te.modalities)[weak])
        weak_acc = np.mean(weak_pred == te.labels)

        frac = empirical_collision_fraction(model, te)
        bound = collision_bound(m, model.encoding_dims)
        print(f"{m:>2} {bound:>7.3f} {frac:>8.3f} {acc:>9.3f} {weak_acc:>15.3f}")


if __name__ == "__main__":
    main()
