"""Fill in missing modalities at test time.

Trains one EBR model, ranks its modalities by latent similarity to the
strongest one, then drops modalities at increasing rates and compares the
substitution policies on the masked test set.

    python3 demos/missing_modality.py --m 4 --epochs 100
"""

import argparse

from mmcollapse.harness import initial_model
from mmcollapse.substitution import (SubstitutionPolicy, TABLE_RATES,
                                     evaluate_missingness, fit_policy, rank_modalities)
from mmcollapse.synthgen import desk_dataset
from mmcollapse.trainers import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--m", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    tr, te = desk_dataset(args.m, args.seed, n_train=2000, n_test=500)
    cfg = TrainConfig(mode="ebr", epochs=args.epochs, seed=args.seed)
    model, _ = train(initial_model(tr, args.seed, "ebr"), tr, cfg)

    ranking = rank_modalities(model, tr)
    print(f"reference modality {ranking.reference}; others by similarity {ranking.order}")
    print("similarities " + " ".join(f"{s:.3f}" for s in ranking.similarity))

    print(f"{'policy':>14} " + " ".join(f"{r:>6}" for r in TABLE_RATES) + "    mean")
    for kind in ("ebr_ranked", "train_average", "random", "zeros"):
        policy = fit_policy(SubstitutionPolicy(kind, seed=args.seed), model, tr)
        res = evaluate_missingness(model, te, TABLE_RATES, policy, ranking, seed=args.seed)
        print(f"{kind:>14} " + " ".join(f"{a:>6.3f}" for a in res.accuracy)
              + f"  {res.accuracy_mean:.3f}")


if __name__ == "__main__":
    main()
