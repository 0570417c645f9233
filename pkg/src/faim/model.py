"""End-to-end model assembly: patch embedding, stacked
(filter block -> interactive block -> residual layer-norm) layers, and the
classification / reconstruction heads.

Channels are processed independently with shared weights: a batch
[B, channels, T] folds to [B*channels, tokens, dim] through the trunk and
features pool by mean over tokens and channels before the class head.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .afb import AfbParams, LayerActivations, afb_forward, init_afb_params
from .errors import ConfigError, InputError, ShapeError
from .imb import ImbParams, imb_forward, init_imb_params
from .nn import layer_norm, linear
from .rng import CounterRng, derive_seed
from .tensor import Tensor, add, mul, narrow, parameter, reshape, tmean

VARIANTS = ("full", "no_afb", "no_hf", "no_lf", "no_hf_lf", "no_imb", "no_pretrain")


@dataclass
class FaimConfig:
    patch_len: int = 8
    patch_stride: int = 0  # 0 means "same as patch_len" (non-overlapping)
    embed_dim: int = 64
    n_layers: int = 2
    ssm_state: int = 16
    conv_k1: int = 2
    conv_k2: int = 4
    conv_k3: int = 1
    theta_high: float = 0.4
    theta_low: float = 0.05
    tau: float = 0.02
    mask_ratio: float = 0.4
    label_smooth_eps: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    pretrain_epochs: int = 100
    finetune_epochs: int = 300
    batch_size: int = 256
    seed: int = 0
    variant: str = "full"
    literal_cross_pairing: bool = False
    concat_fusion: bool = False
    share_in_proj: bool = False

    def __post_init__(self):
        if self.patch_len < 1:
            raise ConfigError(f"patch_len must be >= 1, got {self.patch_len}")
        if self.patch_stride == 0:
            self.patch_stride = self.patch_len
        if self.patch_stride < 1:
            raise ConfigError(f"patch_stride must be >= 1, got {self.patch_stride}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0 <= self.label_smooth_eps < 1:
            raise ConfigError(f"label_smooth_eps must be in [0, 1), got {self.label_smooth_eps}")
        if self.batch_size < 1 or self.batch_size > 256:
            raise ConfigError(f"batch_size must be in [1, 256], got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose one of {VARIANTS}")


@dataclass
class FaimLayer:
    afb: AfbParams
    imb: ImbParams
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class FaimModel:
    config: FaimConfig
    n_classes: int
    n_channels: int
    series_len: int
    n_patches: int
    embed_w: Tensor = None
    embed_b: Tensor = None
    pos_emb: Tensor = None
    mask_token: Tensor = None
    layers: list[FaimLayer] = field(default_factory=list)
    cls_w: Tensor = None
    cls_b: Tensor = None
    recon_w: Tensor = None
    recon_b: Tensor = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Stable, duplicate-free (name, tensor) list covering the model."""
        out = [
            ("embed.w", self.embed_w),
            ("embed.b", self.embed_b),
            ("pos_emb", self.pos_emb),
            ("mask_token", self.mask_token),
        ]
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}"
            afb = layer.afb
            out += [(f"{p}.afb.theta_high", afb.theta_high), (f"{p}.afb.theta_low", afb.theta_low)]
            for tag, psi in (
                ("psi_global", afb.psi_global),
                ("psi_high", afb.psi_high_local),
                ("psi_low", afb.psi_low_local),
            ):
                out += [
                    (f"{p}.afb.{tag}.w1", psi.w1),
                    (f"{p}.afb.{tag}.b1", psi.b1),
                    (f"{p}.afb.{tag}.w2", psi.w2),
                    (f"{p}.afb.{tag}.b2", psi.b2),
                ]
            imb = layer.imb
            out += [(f"{p}.imb.in_w_1", imb.in_w_1), (f"{p}.imb.in_b_1", imb.in_b_1)]
            if not imb.share_in_proj:
                out += [(f"{p}.imb.in_w_2", imb.in_w_2), (f"{p}.imb.in_b_2", imb.in_b_2)]
            out += [
                (f"{p}.imb.gate_w", imb.gate_w),
                (f"{p}.imb.gate_b", imb.gate_b),
                (f"{p}.imb.conv_1", imb.conv_1),
                (f"{p}.imb.conv_1_bias", imb.conv_1_bias),
                (f"{p}.imb.conv_2", imb.conv_2),
                (f"{p}.imb.conv_2_bias", imb.conv_2_bias),
            ]
            for tag, ssm in (("ssm_1", imb.ssm_1), ("ssm_2", imb.ssm_2)):
                out += [
                    (f"{p}.imb.{tag}.a_log", ssm.a_log),
                    (f"{p}.imb.{tag}.w_b", ssm.w_b),
                    (f"{p}.imb.{tag}.w_c", ssm.w_c),
                    (f"{p}.imb.{tag}.w_delta", ssm.w_delta),
                    (f"{p}.imb.{tag}.delta_bias", ssm.delta_bias),
                ]
            out += [
                (f"{p}.imb.ln_1_gamma", imb.ln_1_gamma),
                (f"{p}.imb.ln_1_beta", imb.ln_1_beta),
                (f"{p}.imb.ln_2_gamma", imb.ln_2_gamma),
                (f"{p}.imb.ln_2_beta", imb.ln_2_beta),
                (f"{p}.imb.conv_3", imb.conv_3),
                (f"{p}.imb.conv_3_bias", imb.conv_3_bias),
                (f"{p}.imb.out_w", imb.out_w),
                (f"{p}.imb.out_b", imb.out_b),
                (f"{p}.ln_gamma", layer.ln_gamma),
                (f"{p}.ln_beta", layer.ln_beta),
            ]
        out += [
            ("cls.w", self.cls_w),
            ("cls.b", self.cls_b),
            ("recon.w", self.recon_w),
            ("recon.b", self.recon_b),
        ]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def padded_length(t: int, b: int, stride: int) -> int:
    if t < b:
        return b
    rem = (t - b) % stride
    return t if rem == 0 else t + (stride - rem)


def n_patches_for(t: int, b: int, stride: int) -> int:
    return (padded_length(t, b, stride) - b) // stride + 1


def build_model(config: FaimConfig, n_classes: int, n_channels: int, series_len: int) -> FaimModel:
    if n_classes < 1:
        raise ConfigError(f"n_classes must be >= 1, got {n_classes}")
    if series_len < 1:
        raise InputError(f"series length must be >= 1, got {series_len}")
    b, stride, dim = config.patch_len, config.patch_stride, config.embed_dim
    z = n_patches_for(series_len, b, stride)
    rng = CounterRng(derive_seed(config.seed, "model-init"))
    model = FaimModel(
        config=config,
        n_classes=n_classes,
        n_channels=n_channels,
        series_len=series_len,
        n_patches=z,
        embed_w=parameter(rng.normal((b, dim), std=1.0 / np.sqrt(b))),
        embed_b=parameter(np.zeros(dim)),
        pos_emb=parameter(rng.normal((z, dim), std=0.02)),
        mask_token=parameter(rng.normal((b,), std=0.02)),
        cls_w=parameter(rng.normal((dim, n_classes), std=1.0 / np.sqrt(dim))),
        cls_b=parameter(np.zeros(n_classes)),
        recon_w=parameter(rng.normal((dim, b), std=1.0 / np.sqrt(dim))),
        recon_b=parameter(np.zeros(b)),
    )
    for i in range(config.n_layers):
        layer_rng = rng.spawn("layer", i)
        model.layers.append(
            FaimLayer(
                afb=init_afb_params(
                    dim,
                    layer_rng.spawn("afb"),
                    theta_high=config.theta_high,
                    theta_low=config.theta_low,
                    tau=config.tau,
                    literal_cross_pairing=config.literal_cross_pairing,
                ),
                imb=init_imb_params(
                    dim,
                    config.ssm_state,
                    layer_rng.spawn("imb"),
                    k1=config.conv_k1,
                    k2=config.conv_k2,
                    k3=config.conv_k3,
                    concat_fusion=config.concat_fusion,
                    share_in_proj=config.share_in_proj,
                ),
                ln_gamma=parameter(np.ones(dim)),
                ln_beta=parameter(np.zeros(dim)),
            )
        )
    return model


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def patchify(x, b: int, stride: int) -> np.ndarray:
    """Window the last axis into patches [..., Z, b], padding the tail by
    replicating the final value so every patch is full."""
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    if t < 1:
        raise InputError("cannot patchify an empty series")
    padded = padded_length(t, b, stride)
    if padded > t:
        fill = np.repeat(x[..., -1:], padded - t, axis=-1)
        x = np.concatenate([x, fill], axis=-1)
    z = (padded - b) // stride + 1
    starts = np.arange(z) * stride
    return x[..., starts[:, None] + np.arange(b)]


def embed(patches, model: FaimModel) -> Tensor:
    """Shared linear projection of each patch plus its position row."""
    tokens = patches if isinstance(patches, Tensor) else Tensor(patches)
    z = tokens.shape[-2]
    if z > model.n_patches:
        raise ConfigError(f"{z} patches exceed the {model.n_patches} position rows built")
    projected = linear(tokens, model.embed_w, model.embed_b)
    return add(projected, narrow(model.pos_emb, 0, 0, z))


def _run_layers(tokens: Tensor, model: FaimModel) -> tuple[Tensor, list[LayerActivations]]:
    variant = model.config.variant
    acts: list[LayerActivations] = []
    for layer in model.layers:
        if variant == "no_afb":
            u, afb_acts = tokens, None
        else:
            u, afb_acts = afb_forward(
                tokens,
                layer.afb,
                use_high=variant not in ("no_hf", "no_hf_lf"),
                use_low=variant not in ("no_lf", "no_hf_lf"),
            )
        v = u if variant == "no_imb" else imb_forward(u, layer.imb)
        tokens = layer_norm(add(v, tokens), layer.ln_gamma, layer.ln_beta)
        acts.append(afb_acts)
    return tokens, acts


def _check_channels(x: np.ndarray, model: FaimModel):
    if x.shape[-2] != model.n_channels:
        raise InputError(
            f"input has {x.shape[-2]} channels but the model was built for {model.n_channels}"
        )


def classify_batch(model: FaimModel, x) -> tuple[Tensor, list[LayerActivations]]:
    """Logits for a batch [B, channels, T] -> Tensor[B, n_classes]."""
    x = np.asarray(x, dtype=np.float64)
    _check_channels(x, model)
    n_batch, n_chan = x.shape[0], x.shape[1]
    patches = patchify(x, model.config.patch_len, model.config.patch_stride)
    z = patches.shape[-2]
    folded = patches.reshape(n_batch * n_chan, z, model.config.patch_len)
    tokens = embed(folded, model)
    tokens, acts = _run_layers(tokens, model)
    pooled = tmean(tokens, axis=1)
    pooled = tmean(reshape(pooled, (n_batch, n_chan, model.config.embed_dim)), axis=1)
    return linear(pooled, model.cls_w, model.cls_b), acts


def faim_forward(x, model: FaimModel) -> tuple[Tensor, list[LayerActivations]]:
    """Logits for one sample [channels, T] -> Tensor[n_classes]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"faim_forward expects [channels, T], got shape {x.shape}")
    logits, acts = classify_batch(model, x[None])
    return reshape(logits, (model.n_classes,)), acts


def reconstruct_forward(x, mask, model: FaimModel) -> Tensor:
    """Reconstructed patches [..., channels, Z, patch_len] from masked input.

    ``mask`` is 0/1 per (channel, patch); masked patches are replaced by the
    learnable mask token before embedding.  All patches are returned; the
    loss applies the mask weights.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    _check_channels(x, model)
    mask = np.asarray(mask, dtype=np.float64)
    if single and mask.ndim == 2:
        mask = mask[None]
    b = model.config.patch_len
    patches = patchify(x, b, model.config.patch_stride)
    if mask.shape != patches.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match patch grid {patches.shape[:-1]}")
    lam = mask[..., None]
    kept = Tensor(patches * (1.0 - lam))
    replaced = mul(model.mask_token, Tensor(lam))
    masked = add(kept, replaced)
    n_batch, n_chan, z = patches.shape[0], patches.shape[1], patches.shape[2]
    tokens = embed(reshape(masked, (n_batch * n_chan, z, b)), model)
    tokens, _ = _run_layers(tokens, model)
    recon = linear(tokens, model.recon_w, model.recon_b)
    recon = reshape(recon, (n_batch, n_chan, z, b))
    if single:
        recon = reshape(recon, (n_chan, z, b))
    return recon


def reference_patches(x, model: FaimModel) -> np.ndarray:
    """Ground-truth patch values the reconstruction loss compares against."""
    x = np.asarray(x, dtype=np.float64)
    return patchify(x, model.config.patch_len, model.config.patch_stride)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"FAIM1\n"


def save_checkpoint(model: FaimModel, path: str, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, length-prefixed JSON header, float64 blob.

    The header stores the config, a parameter manifest (name, shape, offset
    in values), and caller metadata (label map, normalization stats, seed).
    Byte output is deterministic for identical model state.
    """
    manifest = []
    blob = io.BytesIO()
    offset = 0
    for name, tensor in model.named_parameters():
        arr = np.asarray(tensor.data, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob.write(arr.tobytes())
        offset += arr.size
    header = {
        "config": asdict(model.config),
        "n_classes": model.n_classes,
        "n_channels": model.n_channels,
        "series_len": model.series_len,
        "n_patches": model.n_patches,
        "meta": meta or {},
        "params": manifest,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(encoded).to_bytes(8, "little"))
        fh.write(encoded)
        fh.write(blob.getvalue())


def load_checkpoint(path: str) -> tuple[FaimModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise InputError(f"{path} is not a model checkpoint (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        blob = fh.read()
    config = FaimConfig(**header["config"])
    model = build_model(config, header["n_classes"], header["n_channels"], header["series_len"])
    values = np.frombuffer(blob, dtype=np.float64)
    by_name = dict(model.named_parameters())
    if set(by_name) != {entry["name"] for entry in header["params"]}:
        raise InputError(f"{path} parameter manifest does not match the rebuilt model")
    for entry in header["params"]:
        tensor = by_name[entry["name"]]
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = values[entry["offset"] : entry["offset"] + size].reshape(shape)
        if chunk.shape != tensor.data.shape:
            raise ShapeError(f"checkpoint shape {chunk.shape} for {entry['name']} mismatches {tensor.data.shape}")
        tensor.data = chunk.copy()
    return model, header["meta"]
