"""Streaming class-conditional Gaussians, from a linear head to data-driven estimates.

Run: python demos/01_streaming_gda.py

A bank starts as the Gaussian reading of a linear softmax head (identity
covariance, means equal to the weight rows) and is then refined batch by
batch from weighted sufficient statistics.  We watch the parameters drift
from the head towards the true class structure.
"""
import numpy as np

from adapgc import HeadParams, generate, init_from_head, make_scenario, quad_scores, update_bank
from adapgc.gaussian import softmax

rng = np.random.default_rng(0)

# at t=0 the quadratic scores reproduce the head's softmax exactly
head = HeadParams(rng.standard_normal((3, 8)), rng.standard_normal(3))
z = rng.standard_normal((5, 8))
bank = init_from_head(head)
gap = np.abs(softmax(quad_scores(z, bank), axis=1) - softmax(head.logits(z), axis=1)).max()
print(f"head vs initial bank posterior, max gap: {gap:.1e}")

# now stream labelled data through a bank with no EMA smoothing (alpha=0)
spec = make_scenario(num_classes=3, raw_dim=8, num_samples=3000, noise_scale=0.5, seed=0)
stream = generate(spec)
truth = spec.modality1
bank = init_from_head(HeadParams(np.zeros((3, 8)), np.zeros(3)), alpha=0.0)

print("\n samples  mean err  cov rel err")
for k, (x, _, y) in enumerate(stream.batches(16)):
    update_bank(bank, x, np.eye(3)[y])
    if (k + 1) % 40 == 0:
        mean_err = np.abs(bank.means - truth.means).max()
        cov_err = max(
            np.linalg.norm(bank.covariances[c] - truth.covariances[c]) / np.linalg.norm(truth.covariances[c])
            for c in range(3)
        )
        print(f"{(k + 1) * 16:8d}  {mean_err:8.4f}  {cov_err:11.4f}")

print("\npriors:", np.round(bank.priors, 3), " true:", np.round(np.bincount(stream.labels) / len(stream), 3))

# with heavy smoothing the bank moves slowly: same data, alpha=0.9
slow = init_from_head(HeadParams(np.zeros((3, 8)), np.zeros(3)), alpha=0.9)
for x, _, y in generate(spec, 0, 320).batches(16):
    update_bank(slow, x, np.eye(3)[y])
print(f"after 320 samples, alpha=0.9 mean err {np.abs(slow.means - truth.means).max():.3f}")
