#!/usr/bin/env python3
"""Teacher-student distillation up close.

Trains students for the last two mock-backbone blocks on one normal class,
then shows the loss curves, the per-block discrepancy distributions for
normal vs anomalous test samples, and the reported normality diagnostics of
the discrepancy columns.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

import dualspace as ds

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)


def main():
    backbone = ds.make_mock_backbone(seed=0)
    data = ds.get_dataset("synthetic-blobs")
    train_raw, test_raw = data.load()
    prep_train = ds.preprocess(train_raw, backbone.spec)
    prep_test = ds.preprocess(test_raw, backbone.spec)
    normal = prep_train.subset(np.flatnonzero(train_raw.labels == 0),
                               drop_labels=True)

    print(f"training students for blocks [2, 3] on {len(normal)} normal samples")
    cfg = ds.TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, seed=0)
    ensemble = ds.train_students([normal], backbone, [2, 3], cfg)

    fig, axes = plt.subplots(1, 3, figsize=(14, 4.2))
    for j, log in sorted(ensemble.training_log["per_block"].items()):
        losses = log["epoch_losses"]
        axes[0].semilogy(losses, "o-", label=f"block {j}")
        print(f"  block {j}: loss {losses[0]:.4g} -> {losses[-1]:.4g} "
              f"({len(losses)} epochs{', early stop' if log['stopped_early'] else ''})")
    axes[0].set_title("student training loss")
    axes[0].set_xlabel("epoch")
    axes[0].legend(fontsize=8)

    disc = ds.discrepancy_features(prep_test, backbone, ensemble)
    per_sample = disc.values.mean(axis=1)
    normal_mask = test_raw.labels == 0
    print(f"mean discrepancy: normal {per_sample[normal_mask].mean():.4g}, "
          f"anomalous {per_sample[~normal_mask].mean():.4g}")
    bins = np.linspace(0, np.percentile(per_sample, 99), 40)
    axes[1].hist(per_sample[normal_mask], bins=bins, alpha=0.6, density=True,
                 label="normal (class 0)")
    axes[1].hist(per_sample[~normal_mask], bins=bins, alpha=0.6, density=True,
                 label="anomalous")
    axes[1].set_title("teacher-student discrepancy")
    axes[1].legend(fontsize=8)

    print("normality diagnostics of training discrepancies (reported, not asserted):")
    for j, stats in ensemble.training_log["normality"].items():
        print(f"  block {j}: skew {stats['skew']:+.2f}, "
              f"excess kurtosis {stats['excess_kurtosis']:+.2f}")

    # identity-initialized students reproduce the teacher exactly
    copy_cfg = ds.TrainConfig(epochs=1, init_mode="copy", early_stop_patience=None)
    copy_ens = ds.train_students([normal], backbone, [2, 3], copy_cfg)
    copy_disc = ds.discrepancy_features(prep_test, backbone, copy_ens)
    print(f"copy-initialized students: max discrepancy = {copy_disc.values.max():.3g}")

    zf = disc.to_features()
    model = ds.fit_gaussian(ds.FeatureMatrix(
        ds.discrepancy_features(normal, backbone, ensemble).values, "finetuned"))
    scores = ds.gaussian_log_likelihood(model, zf)
    print(f"finetuned-space AUROC (class 0 normal): "
          f"{ds.auroc(scores, (~normal_mask).astype(int)):.4f}")
    axes[2].scatter(disc.values[:, 0], disc.values[:, 1], s=8,
                    c=np.where(normal_mask, "C0", "C3"), alpha=0.6)
    axes[2].set_xlabel("block 2 discrepancy")
    axes[2].set_ylabel("block 3 discrepancy")
    axes[2].set_title("discrepancy features (blue = normal)")

    fig.tight_layout()
    path = OUT / "distillation.png"
    fig.savefig(path, dpi=130)
    print(f"saved {path}")


if __name__ == "__main__":
    main()
