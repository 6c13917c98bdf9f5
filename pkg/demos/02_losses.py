"""The confidence-weighted, scale-normalized pointmap loss."""

# %%
import numpy as np

from pointfuse.losses import (
    LossConfig, confidence_positive, loss_and_gradients, normalized_regression_loss, total_loss,
)
from pointfuse.model import PredictionBundle
from pointfuse.synthgen import make_sample

rng = np.random.default_rng(0)
s = make_sample(1, 3)

# %% the regression term compares pointmaps after dividing each by its mean point norm,
# so a prediction that is right up to scale costs nothing
target = s.global_points[1]
mask = s.masks[1]
for c in (0.1, 1.0, 7.3):
    print(f"scale {c}: max per-pixel loss {normalized_regression_loss(c * target, target, mask).max():.2e}")

noisy = target + rng.normal(scale=0.05, size=target.shape)
print("5 cm noise, mean loss:", normalized_regression_loss(noisy, target, mask)[mask].mean().round(4))

# %% confidence: the raw output goes through 1 + exp(.), so it is always > 1
print(confidence_positive(np.array([-5.0, 0.0, 3.0])))

# %% total loss on a perfect prediction is just the confidence regularizer
perfect = PredictionBundle(s.local_points, np.zeros(s.masks.shape), s.global_points, np.zeros(s.masks.shape))
rep = total_loss(perfect, s, LossConfig(alpha=0.2))
print("perfect prediction:", rep.total, "=", 2 * s.n_views * 0.2 * np.log(2.0))

# %% gradients come back as a bundle of the same shape
noisy_bundle = PredictionBundle(s.local_points + rng.normal(scale=0.1, size=s.local_points.shape),
                                rng.normal(size=s.masks.shape),
                                s.global_points + rng.normal(scale=0.1, size=s.global_points.shape),
                                rng.normal(size=s.masks.shape))
rep, grad = loss_and_gradients(noisy_bundle, s)
print("loss", round(rep.total, 4), "| grad norm on global points",
      np.linalg.norm(grad.global_points).round(4), "| background grad is zero:",
      not grad.global_points[~s.masks].any())
