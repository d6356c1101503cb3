"""Split the graph embedding into shared and site-specific halves, and bound
their statistical dependence with a trainable lower-bound estimator."""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor

FEATURE_DIM = 128  # width of each disentangled component


def _mlp_bn_block(theta, x: Tensor, prefix: str, *, train: bool,
                  activation=tt.relu, update_running: bool = True) -> Tensor:
    h = tt.add(tt.matmul(x, theta[f"{prefix}.w"]), theta[f"{prefix}.b"])
    h = tt.batch_norm(h, theta[f"{prefix}.bn.gamma"], theta[f"{prefix}.bn.beta"],
                      theta[f"{prefix}.bn.running_mean"], theta[f"{prefix}.bn.running_var"],
                      train=train, update_running=update_running)
    return activation(h)


def _branch(theta, z: Tensor, branch: str, *, train: bool, drop_mask) -> Tensor:
    h = _mlp_bn_block(theta, z, f"dis.{branch}.fc1", train=train)
    h = tt.dropout(h, 0.2, mask=drop_mask, train=train)
    return _mlp_bn_block(theta, h, f"dis.{branch}.fc2", train=train)


def disentangle_forward(theta, z: Tensor, *, train: bool,
                        di_mask=None, ds_mask=None) -> tuple[Tensor, Tensor]:
    """Two independent stacks map the embedding to the invariant and the
    specific component, (B, 480) -> (B, 128) each."""
    f_di = _branch(theta, z, "di", train=train, drop_mask=di_mask)
    f_ds = _branch(theta, z, "ds", train=train, drop_mask=ds_mask)
    return f_di, f_ds


def mine_score(theta, p: Tensor, q: Tensor, *, train: bool,
               update_running: bool = True) -> Tensor:
    """Statistics-network score of a (p, q) pair batch -> (B,).

    The network input is 128-wide while the pair is 2x128, so the pair
    enters as the elementwise sum.
    """
    x = tt.add(p, q)
    h = _mlp_bn_block(theta, x, "mine.fc1", train=train,
                      activation=lambda t: tt.leaky_relu(t, 0.01),
                      update_running=update_running)
    out = tt.add(tt.matmul(h, theta["mine.fc2.w"]), theta["mine.fc2.b"])
    return tt.reshape(out, (out.shape[0],))


def dv_estimate(joint_scores: Tensor, marginal_scores: Tensor) -> Tensor:
    """Donsker-Varadhan value: mean(joint) - log(mean(exp(marginal))).

    The log-mean-exp is computed in shifted form so large scores cannot
    overflow.
    """
    shift = tt.amax(marginal_scores, axis=0)  # scalar
    shifted = tt.sub(marginal_scores, tt.reshape(shift, (1,)))
    lme = tt.add(tt.log(tt.mean(tt.exp(shifted))), shift)
    return tt.sub(tt.mean(joint_scores), lme)


def mine_estimate(theta, f_di: Tensor, f_ds: Tensor, perm: np.ndarray, *,
                  train: bool, update_running: bool = True) -> Tensor:
    """Dependence estimate between the two components on one batch.

    Joint pairs align rows; marginal pairs re-pair the specific component by
    `perm`. Batches below 2 are rejected because the marginal shuffle is
    undefined.
    """
    n = f_di.shape[0]
    if n < 2:
        raise ValueError(f"dependence estimate needs a batch of at least 2, got {n}")
    perm = np.asarray(perm, dtype=np.intp)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm must be a permutation of the batch indices")
    joint = mine_score(theta, f_di, f_ds, train=train, update_running=update_running)
    marginal = mine_score(theta, f_di, tt.take_rows(f_ds, perm), train=train,
                          update_running=False)
    return dv_estimate(joint, marginal)


def mi_loss(estimate: Tensor) -> Tensor:
    """Nonnegative dependence penalty: the absolute estimator value."""
    return tt.absolute(estimate)


def marginal_permutation(n: int, stream) -> np.ndarray:
    """One uniform permutation per batch; tiny batches redraw until no index
    maps to itself, otherwise the first draw stands."""
    perm = stream.permutation(n)
    if n <= 4:
        while np.any(perm == np.arange(n)):
            perm = stream.permutation(n)
    return perm
