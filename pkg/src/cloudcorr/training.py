"""End-to-end optimization: configuration, parameter store, Adam updates,
the training loop, checkpoint I/O and inference helpers.

Checkpoint format: the magic bytes ``C3DCKPT1`` and a newline, a text
manifest with one line per tensor ("name rank dim0 dim1 ..."), a blank line,
then the tensors' little-endian float32 payloads concatenated in manifest
order. Parameters are initialized at float32 resolution so a save/load round
trip reproduces them exactly.

Config files are UTF-8 ``key = value`` lines ('#' comments and blank lines
allowed); unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import deformer as deformer_mod
from . import embedding as embedding_mod
from . import indicator
from . import losses
from .autodiff import NumericError, Tensor, backward
from .embedding import EmbeddingParams, embed, init_embedding_params
from .deformer import DeformerParams, init_deformer_params, reconstruct_both
from .indicator import CorrMatrix, SharpenConfig, quantize, sharpen, similarity
from .pointcloud import ContractError, PointCloud, ShapePair, normalize_unit

CHECKPOINT_MAGIC = b"C3DCKPT1"

MODES = ("unsupervised", "supervised", "chamfer-ablation", "rec-only-ablation")


class ConfigError(ValueError):
    """Bad training configuration or config file."""


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the current model."""


@dataclass
class TrainConfig:
    mode: str = "unsupervised"
    epochs: int = 50
    batch_size: int = 10
    learning_rate: float = 1e-4
    seed: int = 0
    lambda1: float = 0.1
    lambda2: float = 0.01
    k_mfd: int = 10
    layers: int = 3
    feature_dim: int = 96
    knn: int = 10
    hidden: int = 128
    prior_ratio: float = 10.0
    tau: float = 3.0
    eps_sigma: float = 1e-8
    checkpoint_every: int = 0  # epochs; 0 = only at the end

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def sharpen_config(self) -> SharpenConfig:
        return SharpenConfig(prior_ratio=self.prior_ratio, tau=self.tau, eps_sigma=self.eps_sigma)

    def loss_weights(self) -> losses.LossWeights:
        if self.mode == "rec-only-ablation":
            return losses.LossWeights(lambda1=0.0, lambda2=0.0, k_mfd=self.k_mfd)
        return losses.LossWeights(lambda1=self.lambda1, lambda2=self.lambda2, k_mfd=self.k_mfd)


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines into a TrainConfig; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "int":
                values[key] = int(value)
            elif ftype == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for key {key!r}") from None
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parameter store


@dataclass(eq=False)
class ModelParams:
    """All learnable tensors plus their Adam moment buffers, addressable by name."""

    embedding: EmbeddingParams
    deformer: DeformerParams
    moments: dict = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.embedding.layers, start=1):
            out[f"embed.layer{i}.weight"] = layer.weight
            out[f"embed.layer{i}.bias"] = layer.bias
        out["embed.global_proj.weight"] = self.embedding.proj_weight
        out["embed.global_proj.bias"] = self.embedding.proj_bias
        branches = [("deform", self.deformer.branch_a)]
        if not self.deformer.shared:
            branches.append(("deform_b", self.deformer.branch_b))
        for prefix, stack in branches:
            for j, t in enumerate(stack.tensors()):
                kind = "weight" if j % 2 == 0 else "bias"
                out[f"{prefix}.layer{j // 2 + 1}.{kind}"] = t
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def zero_grads(self) -> None:
        ad.zero_grads(self.tensors())

    def ensure_moments(self) -> None:
        for name, t in self.named().items():
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(t.data), np.zeros_like(t.data))


def init_params(cfg: TrainConfig, rng: np.random.Generator | None = None, shared_deformer=True) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = ModelParams(
        embedding=init_embedding_params(rng, cfg.layers, cfg.feature_dim, cfg.knn),
        deformer=init_deformer_params(rng, cfg.feature_dim, cfg.hidden, shared=shared_deformer),
    )
    params.ensure_moments()
    return params


def adam_step(
    params: ModelParams,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step_count: int = 1,
) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterward."""
    params.ensure_moments()
    for name, p in params.named().items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient buffer")
        g = p.grad
        m, v = params.moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step_count)
        v_hat = v / (1.0 - beta2**step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# forward pass and training loop


def forward_pair(params: ModelParams, cfg: TrainConfig, pair: ShapePair):
    """One full forward pass; returns (loss Tensor, CorrMatrix, component dict)."""
    a_cloud = normalize_unit(pair.source)
    b_cloud = normalize_unit(pair.target)
    a = Tensor(a_cloud.points)
    b = Tensor(b_cloud.points)
    fa = embed(a, params.embedding)
    fb = embed(b, params.embedding)
    scores = similarity(fa.pointwise, fb.pointwise)
    corr = sharpen(scores, cfg.sharpen_config())
    p = corr.soft

    components: dict[str, float] = {}
    if cfg.mode == "supervised":
        if pair.gt is None:
            raise ContractError("supervised mode needs ground-truth correspondence")
        loss = losses.loss_supervised(p, pair.gt)
        components["supervised"] = loss.item()
        return loss, corr, components

    a_rec, b_rec = reconstruct_both(a, b, p, fa.global_vec, fb.global_vec, params.deformer)
    weights = cfg.loss_weights()
    if cfg.mode == "chamfer-ablation":
        rec = ad.add(losses.loss_chamfer(a, a_rec), losses.loss_chamfer(b, b_rec))
    else:
        rec = losses.loss_rec(a, a_rec, b, b_rec)
    components["rec"] = rec.item()
    loss = rec
    if weights.lambda1 > 0:
        perm = losses.loss_perm(p)
        components["perm"] = perm.item()
        loss = ad.add(loss, ad.scale(perm, weights.lambda1))
    if weights.lambda2 > 0:
        mfd = losses.loss_mfd(p, a, b, weights.k_mfd)
        components["mfd"] = mfd.item()
        loss = ad.add(loss, ad.scale(mfd, weights.lambda2))
    return loss, corr, components


def train(pairs: list[ShapePair], cfg: TrainConfig, checkpoint_path=None):
    """Optimize the model on the given pairs.

    Pairs are shuffled each epoch with the run seed; within a batch the pairs
    run sequentially and their gradients accumulate (scaled to a batch mean)
    before a single Adam step. Returns (ModelParams, per-epoch mean losses).
    """
    if not pairs:
        raise ContractError("train needs at least one pair")
    n = pairs[0].n
    for pair in pairs:
        if pair.n != n:
            raise ContractError(f"all pairs must share one size, got {pair.n} and {n}")
    if n <= cfg.knn:
        raise ContractError(f"cloud size {n} must exceed the neighbor count {cfg.knn}")
    if cfg.mode == "supervised" and any(pair.gt is None for pair in pairs):
        raise ConfigError("supervised mode needs ground truth for every pair")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    log: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            for pair_index in batch:
                loss, _, components = forward_pair(params, cfg, pairs[pair_index])
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch + 1}, pair {int(pair_index)}: "
                        f"components={components}"
                    )
                backward(ad.scale(loss, 1.0 / len(batch)))
                epoch_sum += value
            step += 1
            adam_step(params, cfg.learning_rate, step_count=step)
        log.append(epoch_sum / len(pairs))
        if (
            checkpoint_path is not None
            and cfg.checkpoint_every > 0
            and (epoch + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(params, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, log


# ---------------------------------------------------------------------------
# inference


def predict_soft(params: ModelParams, cfg: TrainConfig, source: PointCloud, target: PointCloud) -> CorrMatrix:
    """Soft correspondence between two clouds (normalized internally)."""
    if source.n != target.n:
        raise ContractError(f"clouds must be the same size, got {source.n} and {target.n}")
    fa = embed(normalize_unit(source), params.embedding)
    fb = embed(normalize_unit(target), params.embedding)
    return sharpen(similarity(fa.pointwise, fb.pointwise), cfg.sharpen_config())


def predict_indices(params: ModelParams, cfg: TrainConfig, source: PointCloud, target: PointCloud) -> np.ndarray:
    """Hard correspondence: row-argmax of the soft matrix."""
    corr = predict_soft(params, cfg, source, target)
    corr.hard = quantize(corr.soft)
    return corr.hard


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    named = params.named()
    manifest = [
        " ".join([name, str(t.data.ndim)] + [str(d) for d in t.data.shape])
        for name, t in named.items()
    ]
    blob = bytearray()
    blob += CHECKPOINT_MAGIC + b"\n"
    blob += ("\n".join(manifest) + "\n\n").encode("utf-8")
    for t in named.values():
        blob += t.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(params: ModelParams, path) -> ModelParams:
    """Fill ``params`` from a checkpoint, validating names and shapes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise CheckpointError(f"bad checkpoint magic in {path}")
    header_end = raw.find(b"\n\n", len(CHECKPOINT_MAGIC) + 1)
    if header_end < 0:
        raise CheckpointError(f"truncated checkpoint manifest in {path}")
    manifest_lines = raw[len(CHECKPOINT_MAGIC) + 1 : header_end].decode("utf-8").splitlines()
    payload = raw[header_end + 2 :]

    entries = []
    for line in manifest_lines:
        tokens = line.split()
        if len(tokens) < 2:
            raise CheckpointError(f"bad manifest line {line!r}")
        name, rank, dims = tokens[0], int(tokens[1]), tuple(int(d) for d in tokens[2:])
        if len(dims) != rank:
            raise CheckpointError(f"manifest rank/dims mismatch on {name}")
        entries.append((name, dims))

    named = params.named()
    manifest_names = [name for name, _ in entries]
    if manifest_names != list(named.keys()):
        missing = set(named) - set(manifest_names)
        extra = set(manifest_names) - set(named)
        raise CheckpointError(
            f"checkpoint does not match the model architecture "
            f"(missing={sorted(missing)}, unexpected={sorted(extra)})"
        )
    offset = 0
    for name, dims in entries:
        tensor = named[name]
        if tuple(tensor.data.shape) != dims:
            raise CheckpointError(
                f"shape mismatch for parameter {name}: checkpoint {dims}, model {tuple(tensor.data.shape)}"
            )
        count = int(np.prod(dims)) if dims else 1
        chunk = payload[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"truncated payload for parameter {name}")
        tensor.data[...] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(dims)
        offset += 4 * count
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes after the last parameter")
    return params
