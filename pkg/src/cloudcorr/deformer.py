"""Symmetric deformation module.

The soft correspondence P permutes the input pair (A_hat = P^T A aligns A
with B's order, B_hat = P B aligns B with A's order). Each permuted cloud is
then pushed point by point through a 3-layer MLP conditioned on the *other*
cloud's global feature vector, reconstructing that other cloud. Both
directions share one parameter set by default.

Ablation switches: ``use_global=False`` feeds zeros instead of the global
vectors, and ``FcDeformerParams``/``fc_reconstruct`` replace the whole module
with a fully connected map on the flattened cloud (consuming no permutation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.2


@dataclass(eq=False)
class MlpStack:
    """Three linear layers; the last one has no activation."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass(eq=False)
class DeformerParams:
    """Per-direction MLP stacks; with shared=True both names bind one object."""

    branch_a: MlpStack  # reconstructs A from (B_hat, v_a)
    branch_b: MlpStack  # reconstructs B from (A_hat, v_b)
    shared: bool = True
    use_global: bool = True

    def stacks(self) -> list[MlpStack]:
        if self.shared:
            return [self.branch_a]
        return [self.branch_a, self.branch_b]


def init_mlp_stack(rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> MlpStack:
    return MlpStack(
        w1=ad.glorot_uniform(rng, d_in, hidden),
        b1=ad.zeros_param(hidden),
        w2=ad.glorot_uniform(rng, hidden, hidden),
        b2=ad.zeros_param(hidden),
        w3=ad.glorot_uniform(rng, hidden, d_out),
        b3=ad.zeros_param(d_out),
    )


def init_deformer_params(
    rng: np.random.Generator,
    feature_dim: int,
    hidden: int = 128,
    shared: bool = True,
    use_global: bool = True,
) -> DeformerParams:
    branch_a = init_mlp_stack(rng, 3 + feature_dim, hidden, 3)
    branch_b = branch_a if shared else init_mlp_stack(rng, 3 + feature_dim, hidden, 3)
    return DeformerParams(branch_a=branch_a, branch_b=branch_b, shared=shared, use_global=use_global)


def permute_pair(a: Tensor, b: Tensor, p: Tensor):
    """Apply the soft correspondence: A_hat = P^T A, B_hat = P B."""
    a_hat = ad.matmul(ad.transpose(p), a)
    b_hat = ad.matmul(p, b)
    return a_hat, b_hat


def deform(permuted: Tensor, global_vec: Tensor, mlp: MlpStack) -> Tensor:
    """Per-point map: concat the global vector onto each point, run the MLP."""
    n = permuted.shape[0]
    x = ad.concat_cols(permuted, ad.repeat_rows(global_vec, n))
    h = ad.leaky_relu(ad.add(ad.matmul(x, mlp.w1), mlp.b1), LEAKY_SLOPE)
    h = ad.leaky_relu(ad.add(ad.matmul(h, mlp.w2), mlp.b2), LEAKY_SLOPE)
    return ad.add(ad.matmul(h, mlp.w3), mlp.b3)


def reconstruct_both(a: Tensor, b: Tensor, p: Tensor, v_a: Tensor, v_b: Tensor, params: DeformerParams):
    """Reconstruct (A_tilde, B_tilde) from the permuted pair and global vectors."""
    a_hat, b_hat = permute_pair(a, b, p)
    if not params.use_global:
        v_a = Tensor(np.zeros_like(v_a.data))
        v_b = Tensor(np.zeros_like(v_b.data))
    a_rec = deform(b_hat, v_a, params.branch_a)
    b_rec = deform(a_hat, v_b, params.branch_b)
    return a_rec, b_rec


# ---------------------------------------------------------------------------
# fully connected ablation (no permutation consumed)


@dataclass(eq=False)
class FcDeformerParams:
    """Flatten-cloud replacement for the deformer ablation; fixed to one n."""

    n: int
    stack: MlpStack

    def tensors(self) -> list[Tensor]:
        return self.stack.tensors()


def init_fc_deformer_params(rng: np.random.Generator, n: int, hidden: int = 128) -> FcDeformerParams:
    return FcDeformerParams(n=n, stack=init_mlp_stack(rng, 3 * n, hidden, 3 * n))


def fc_reconstruct(cloud: Tensor, params: FcDeformerParams) -> Tensor:
    """Flatten the cloud, run the MLP, reshape back to (n, 3)."""
    n = cloud.shape[0]
    if n != params.n:
        raise ad.ShapeError(f"fc deformer built for n={params.n}, got n={n}")
    x = ad.reshape(cloud, (1, 3 * n))
    h = ad.leaky_relu(ad.add(ad.matmul(x, params.stack.w1), params.stack.b1), LEAKY_SLOPE)
    h = ad.leaky_relu(ad.add(ad.matmul(h, params.stack.w2), params.stack.b2), LEAKY_SLOPE)
    out = ad.add(ad.matmul(h, params.stack.w3), params.stack.b3)
    return ad.reshape(out, (n, 3))
