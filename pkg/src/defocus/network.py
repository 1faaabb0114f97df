"""Network assembly: patch embedding, De-focus blocks, drop path and the two heads.

An image becomes a row-major sequence of patch tokens followed by a learned
``<CLS>`` token at the END of the sequence, so under causal masking it is the
only position that sees every image token.  The classification head reads the
final ``<CLS>`` output; a separate auxiliary head reads the mean of all image
token outputs.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bandpass import BandpassParams, decay_init, rope_frequencies
from .errors import ConfigurationError, FormatError
from .operators import (
    MambaParams, SequenceBatch, defocus_mamba_scan, defocus_retnet_attention,
    defocus_vit_attention, group_rms_norm,
)

__all__ = [
    "DefocusBlockConfig", "ModelConfig", "DropPathSchedule", "DefocusNetwork", "ForwardOutput",
    "patch_embed", "drop_path_rate", "apply_drop_path", "forward", "total_loss",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION", "VARIANTS",
]

VARIANTS = ("vit", "mamba", "retnet")
CHECKPOINT_VERSION = "defocus-checkpoint/1"


@dataclass
class DefocusBlockConfig:
    variant: str = "vit"
    model_dim: int = 32
    num_heads: int = 4
    state_dim: int = 8
    mlp_ratio: float = 4.0
    expand: int = 2
    conv_kernel: int = 4
    gate_conv: bool = True
    use_decay: bool = True
    use_rope: bool = True
    learn_decay: bool = True
    learn_rope: bool = True
    decay_mode: str = "scale"
    decay_range: tuple = (0.5, 0.99)
    norm_eps: float = 1e-6
    group_size: int = 64

    def __post_init__(self):
        self.decay_range = tuple(self.decay_range)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.model_dim % self.num_heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.head_dim % 2:
            raise ConfigurationError(f"head_dim {self.head_dim} must be even")
        if self.state_dim % 2:
            raise ConfigurationError(f"state_dim {self.state_dim} must be even")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def inner_dim(self) -> int:
        return self.expand * self.model_dim


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 1
    num_classes: int = 4
    depth: int = 2
    block: DefocusBlockConfig = field(default_factory=DefocusBlockConfig)
    aux_loss_weight: float = 1.0
    position_scale: float = 1.0
    patch_order: list | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.block, dict):
            self.block = DefocusBlockConfig(**self.block)
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.patch_order is not None:
            order = np.asarray(self.patch_order)
            if sorted(order.tolist()) != list(range(self.num_patches)):
                raise ConfigurationError("patch_order must be a permutation of the patch indices")
            self.patch_order = [int(i) for i in order]

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block"]["decay_range"] = list(self.block.decay_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DropPathSchedule:
    """Linearly increasing drop-path rate: ``start + (end - start) * min(step/total, 1)``."""

    start_rate: float = 0.1
    end_rate: float = 0.7
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.start_rate <= self.end_rate < 1.0:
            raise ConfigurationError(
                f"need 0 <= start_rate <= end_rate < 1, got ({self.start_rate}, {self.end_rate})")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be non-negative")

    def rate(self, step: int) -> float:
        return drop_path_rate(self, step)


def drop_path_rate(schedule: DropPathSchedule, step: int) -> float:
    if step < 0:
        raise ConfigurationError("step must be non-negative")
    frac = 1.0 if schedule.total_steps == 0 else min(step / schedule.total_steps, 1.0)
    return schedule.start_rate + (schedule.end_rate - schedule.start_rate) * frac


def apply_drop_path(residual, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Per-sample stochastic depth: keep each batch item with prob ``1 - rate``, rescale kept ones."""
    residual = ad.as_tensor(residual)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"drop path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return residual
    if rng is None:
        raise ConfigurationError("training-mode drop path needs a random generator")
    keep = (rng.random(residual.shape[0]) >= rate).astype(np.float64) / (1.0 - rate)
    return ad.mul(residual, keep.reshape((-1,) + (1,) * (residual.ndim - 1)))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return std * x


def _layer_norm(x, weight, bias, eps):
    mu = ad.mean_over_axis(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean_over_axis(ad.mul(xc, xc), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(xc, ad.sqrt(ad.add(var, eps))), weight), bias)


def _rms_norm(x, weight, eps):
    ms = ad.mean_over_axis(ad.mul(x, x), axis=-1, keepdims=True)
    return ad.mul(ad.div(x, ad.sqrt(ad.add(ms, eps))), weight)


def _linear(x, params, prefix, bias=True):
    y = ad.matmul(x, params[prefix + "/weight"])
    return ad.add(y, params[prefix + "/bias"]) if bias else y


@dataclass
class ForwardOutput:
    cls_logits: Tensor
    aux_logits: Tensor
    layer_inputs: list = field(default_factory=list)
    layer_outputs: list = field(default_factory=list)
    tokens: Tensor | None = None
    pooled: Tensor | None = None


class DefocusNetwork:
    """Parameters plus the forward computation of a bandpass-filtered causal network.

    Parameters live in a flat dict keyed by slash-separated paths such as
    ``blocks/1/filter/theta``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -----------------------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "DefocusNetwork":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bc = config.block
        d, std = bc.model_dim, config.init_std
        patch_dim = config.in_channels * config.patch_size ** 2
        p: dict[str, Tensor] = {}

        def put(name, value, trainable=True):
            p[name] = Tensor(value, requires_grad=trainable, name=name)

        put("patch_embed/weight", _trunc_normal(rng, (patch_dim, d), std))
        put("patch_embed/bias", np.zeros(d))
        put("cls_token", _trunc_normal(rng, (d,), std))
        for i in range(config.depth):
            pre = f"blocks/{i}/"
            if bc.variant in ("vit", "retnet"):
                hidden = int(round(bc.mlp_ratio * d))
                put(pre + "norm1/weight", np.ones(d))
                put(pre + "norm1/bias", np.zeros(d))
                put(pre + "attn/qkv/weight", _trunc_normal(rng, (d, 3 * d), std))
                put(pre + "attn/qkv/bias", np.zeros(3 * d))
                put(pre + "filter/lambda_hat", decay_init(bc.num_heads, bc.decay_range),
                    bc.use_decay and bc.learn_decay)
                put(pre + "filter/theta", np.tile(rope_frequencies(bc.head_dim), (bc.num_heads, 1)),
                    bc.use_rope and bc.learn_rope)
                if bc.variant == "retnet":
                    put(pre + "attn/norm/weight", np.ones(d))
                put(pre + "attn/proj/weight", _trunc_normal(rng, (d, d), std))
                put(pre + "attn/proj/bias", np.zeros(d))
                put(pre + "norm2/weight", np.ones(d))
                put(pre + "norm2/bias", np.zeros(d))
                put(pre + "mlp/fc1/weight", _trunc_normal(rng, (d, hidden), std))
                put(pre + "mlp/fc1/bias", np.zeros(hidden))
                put(pre + "mlp/fc2/weight", _trunc_normal(rng, (hidden, d), std))
                put(pre + "mlp/fc2/bias", np.zeros(d))
            else:
                c, n = bc.inner_dim, bc.state_dim
                put(pre + "norm/weight", np.ones(d))
                put(pre + "mixer/in_proj/weight", _trunc_normal(rng, (d, 2 * c if bc.gate_conv else c), std))
                if bc.gate_conv:
                    put(pre + "mixer/conv/weight", _trunc_normal(rng, (c, bc.conv_kernel), 0.2))
                    put(pre + "mixer/conv/bias", np.zeros(c))
                ssm = MambaParams.init(c, n, rng, std=std)
                put(pre + "mixer/ssm/a_log", ssm.a_log.data)
                put(pre + "mixer/ssm/delta_proj", ssm.delta_proj.data)
                put(pre + "mixer/ssm/delta_bias", ssm.delta_bias.data)
                put(pre + "mixer/ssm/k_proj", ssm.k_proj.data)
                put(pre + "mixer/ssm/q_proj", ssm.q_proj.data)
                put(pre + "filter/theta", np.tile(rope_frequencies(n), (c, 1)),
                    bc.use_rope and bc.learn_rope)
                put(pre + "mixer/d_skip", np.ones(c))
                put(pre + "mixer/norm/weight", np.ones(c))
                put(pre + "mixer/out_proj/weight", _trunc_normal(rng, (c, d), std))
        put("norm/weight", np.ones(d))
        if bc.variant != "mamba":
            put("norm/bias", np.zeros(d))
        put("head/weight", _trunc_normal(rng, (d, config.num_classes), std))
        put("head/bias", np.zeros(config.num_classes))
        put("aux_head/weight", _trunc_normal(rng, (d, config.num_classes), std))
        put("aux_head/bias", np.zeros(config.num_classes))
        return cls(config, p)

    def copy(self) -> "DefocusNetwork":
        new = {}
        for k, t in self.params.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
            new[k] = c
        cfg = ModelConfig.from_dict(json.loads(json.dumps(self.config.to_dict())))
        return DefocusNetwork(cfg, new)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable() if trainable_only else self.params
        return int(sum(t.size for t in ps.values()))

    # -- pieces ---------------------------------------------------------------------
    def bandpass(self, i: int) -> BandpassParams:
        bc = self.config.block
        pre = f"blocks/{i}/filter/"
        return BandpassParams(self.params[pre + "lambda_hat"], self.params[pre + "theta"],
                              bc.head_dim, bc.num_heads, bc.use_decay, bc.use_rope, bc.decay_mode)

    def mamba_params(self, i: int) -> MambaParams:
        pre = f"blocks/{i}/mixer/ssm/"
        p = self.params
        return MambaParams(p[pre + "a_log"], p[pre + "delta_proj"], p[pre + "delta_bias"],
                           p[pre + "k_proj"], p[pre + "q_proj"])

    def _split_heads(self, x, b, n):
        bc = self.config.block
        return ad.transpose(ad.reshape(x, (b, n, bc.num_heads, bc.head_dim)), (0, 2, 1, 3))

    def _merge_heads(self, x, b, n):
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, self.config.block.model_dim))

    def _qkv(self, i, x):
        b, n, d = x.shape
        qkv = _linear(x, self.params, f"blocks/{i}/attn/qkv")
        return tuple(self._split_heads(qkv[:, :, j * d:(j + 1) * d], b, n) for j in range(3))

    def attention_qkv(self, i: int, x) -> tuple[Tensor, Tensor, Tensor]:
        """Per-head ``q, k, v`` ([B, H, L, Dh]) that block ``i`` forms from its input ``x``."""
        bc, p = self.config.block, self.params
        if bc.variant == "mamba":
            raise ConfigurationError("mamba blocks have no query/key/value projections")
        x = _layer_norm(ad.as_tensor(x), p[f"blocks/{i}/norm1/weight"], p[f"blocks/{i}/norm1/bias"], bc.norm_eps)
        return self._qkv(i, x)

    def _attention_mixer(self, i, x):
        bc, p = self.config.block, self.params
        pre = f"blocks/{i}/"
        b, n, _ = x.shape
        q, k, v = self._qkv(i, x)
        ctx = f"block {i}"
        if bc.variant == "vit":
            y = defocus_vit_attention(q, k, v, self.bandpass(i), self.config.position_scale, context=ctx)
            y = self._merge_heads(y, b, n)
        else:
            y = defocus_retnet_attention(q, k, v, self.bandpass(i), self.config.position_scale, context=ctx)
            y = group_rms_norm(self._merge_heads(y, b, n), bc.head_dim, bc.norm_eps,
                               p[pre + "attn/norm/weight"])
        return _linear(y, p, pre + "attn/proj")

    def _mamba_mixer(self, i, x):
        bc, p = self.config.block, self.params
        pre = f"blocks/{i}/mixer/"
        c = bc.inner_dim
        xz = ad.matmul(x, p[pre + "in_proj/weight"])
        if bc.gate_conv:
            xi, z = xz[:, :, :c], xz[:, :, c:]
            w = p[pre + "conv/weight"]
            conv = ad.add(ad.mul(xi, w[:, 0]), p[pre + "conv/bias"])
            for j in range(1, bc.conv_kernel):
                conv = ad.add(conv, ad.mul(ad.shift(xi, j, axis=1), w[:, j]))
            xi = ad.silu(conv)
        else:
            xi, z = xz, None
        theta = p[f"blocks/{i}/filter/theta"] if bc.use_rope else None
        y = defocus_mamba_scan(xi, self.mamba_params(i), theta, self.config.position_scale,
                               normalize=False, context=f"block {i} scan")
        y = ad.add(y, ad.mul(xi, p[pre + "d_skip"]))
        y = group_rms_norm(y, bc.group_size, bc.norm_eps, p[pre + "norm/weight"])
        if z is not None:
            y = ad.mul(y, ad.silu(z))
        return ad.matmul(y, p[pre + "out_proj/weight"])

    def block_forward(self, i: int, x, drop_rate: float = 0.0, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        bc, p = self.config.block, self.params
        pre = f"blocks/{i}/"
        x = ad.as_tensor(x)
        if bc.variant == "mamba":
            h = self._mamba_mixer(i, _rms_norm(x, p[pre + "norm/weight"], bc.norm_eps))
            return ad.add(x, apply_drop_path(h, drop_rate, training, rng))
        h = self._attention_mixer(i, _layer_norm(x, p[pre + "norm1/weight"], p[pre + "norm1/bias"], bc.norm_eps))
        x = ad.add(x, apply_drop_path(h, drop_rate, training, rng))
        h = _linear(_layer_norm(x, p[pre + "norm2/weight"], p[pre + "norm2/bias"], bc.norm_eps), p, pre + "mlp/fc1")
        h = _linear(ad.gelu(h), p, pre + "mlp/fc2")
        return ad.add(x, apply_drop_path(h, drop_rate, training, rng))

    def final_norm(self, x) -> Tensor:
        bc, p = self.config.block, self.params
        if bc.variant == "mamba":
            return _rms_norm(x, p["norm/weight"], bc.norm_eps)
        return _layer_norm(x, p["norm/weight"], p["norm/bias"], bc.norm_eps)

    def heads(self, tokens) -> tuple[Tensor, Tensor, Tensor]:
        """(cls_logits, aux_logits, pooled) from normalised final tokens."""
        cls = tokens[:, -1, :]
        pooled = ad.mean_over_axis(tokens[:, :-1, :], axis=1)
        return _linear(cls, self.params, "head"), _linear(pooled, self.params, "aux_head"), pooled

    def __call__(self, images, **kw) -> ForwardOutput:
        return forward(self, images, **kw)


def patch_embed(image, model: DefocusNetwork) -> SequenceBatch:
    """Flatten non-overlapping patches row-major, project them and append ``<CLS>`` last."""
    cfg = model.config
    image = ad.as_tensor(image)
    if image.ndim != 4:
        raise ConfigurationError(f"images must be [batch, channels, H, W], got {image.shape}")
    b, c, hh, ww = image.shape
    if hh != cfg.image_size or ww != cfg.image_size or c != cfg.in_channels:
        raise ConfigurationError(
            f"expected [{cfg.in_channels}, {cfg.image_size}, {cfg.image_size}] images, got {image.shape[1:]}")
    ps, g = cfg.patch_size, cfg.grid
    patches = ad.reshape(image, (b, c, g, ps, g, ps))
    patches = ad.reshape(ad.transpose(patches, (0, 2, 4, 1, 3, 5)), (b, g * g, c * ps * ps))
    if cfg.patch_order is not None:
        patches = ad.getitem(patches, (slice(None), np.asarray(cfg.patch_order)))
    tokens = _linear(patches, model.params, "patch_embed")
    d = tokens.shape[-1]
    cls = ad.add(np.zeros((b, 1, d)), ad.reshape(model.params["cls_token"], (1, 1, d)))
    return SequenceBatch(ad.concat([tokens, cls], axis=1))


def forward(model: DefocusNetwork, images, step: int = 0, schedule: DropPathSchedule | None = None,
            training: bool = False, rng: np.random.Generator | None = None,
            drop_rate: float | None = None) -> ForwardOutput:
    """Run the network; ``step`` and ``schedule`` set the drop-path rate in training mode."""
    if drop_rate is None:
        drop_rate = drop_path_rate(schedule, step) if (training and schedule is not None) else 0.0
    x = patch_embed(images, model).tokens
    ins, outs = [], []
    for i in range(model.config.depth):
        ins.append(x)
        x = model.block_forward(i, x, drop_rate, training, rng)
        outs.append(x)
    tokens = model.final_norm(x)
    cls_logits, aux_logits, pooled = model.heads(tokens)
    return ForwardOutput(cls_logits, aux_logits, ins, outs, tokens, pooled)


def total_loss(cls_logits, aux_logits, labels, aux_loss_weight: float = 1.0, return_parts: bool = False):
    """``CE(cls) + aux_loss_weight * CE(aux)``."""
    cls_loss = ad.cross_entropy(cls_logits, labels)
    aux_loss = ad.cross_entropy(aux_logits, labels)
    total = ad.add(cls_loss, ad.scale(aux_loss, aux_loss_weight)) if aux_loss_weight else cls_loss
    return (total, cls_loss, aux_loss) if return_parts else total


# -- checkpoints ----------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(model: DefocusNetwork, path) -> None:
    """Write a zip archive of little-endian float64 ``.npy`` arrays plus version and config."""
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "version", CHECKPOINT_VERSION.encode())
        _zip_write(zf, "config.json", json.dumps(model.config.to_dict(), sort_keys=True).encode())
        for name in sorted(model.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(model.params[name].data, dtype="<f8"),
                                      allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> DefocusNetwork:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from None
    with zf:
        names = zf.namelist()
        if "version" not in names or "config.json" not in names:
            raise FormatError(f"{path}: missing version tag or config")
        version = zf.read("version").decode()
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version!r}")
        try:
            config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{path}: bad config ({exc})") from None
        template = DefocusNetwork.init(config, 0)
        params = {}
        for name, ref in template.params.items():
            entry = f"params/{name}.npy"
            if entry not in names:
                raise FormatError(f"{path}: missing parameter {name}")
            arr = np.lib.format.read_array(io.BytesIO(zf.read(entry)), allow_pickle=False)
            if arr.shape != ref.shape:
                raise FormatError(f"{path}: parameter {name} has shape {arr.shape}, expected {ref.shape}")
            params[name] = Tensor(arr.astype(np.float64), requires_grad=ref.requires_grad, name=name)
    return DefocusNetwork(config, params)

