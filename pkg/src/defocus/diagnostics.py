"""Gradient-norm diagnostics, patch rearrangement, resolution transfer and map I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, ResourceError
from .network import DefocusNetwork, load_checkpoint, patch_embed, total_loss
from .operators import softplus_inverse

__all__ = [
    "DiagnosticMap", "receptive_field", "attention_map_approx", "gradient_map", "layer_input",
    "gini", "attention_gini", "rearrange_patches", "invert_permutation", "transfer_resolution",
    "read_pnm", "write_pgm", "write_csv_map", "MAX_MAP_TOKENS",
]

MAX_MAP_TOKENS = 256
KINDS = ("receptive_field", "attention_map", "gradient_map")


@dataclass
class DiagnosticMap:
    """A per-token ``[L]`` or token-by-token ``[L, L]`` field of gradient norms."""

    kind: str
    values: np.ndarray
    layer_index: int
    normalized: bool

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown map kind {self.kind!r}")


def _normalize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(values), False
    return values / peak, True


def _as_batch(image) -> np.ndarray:
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != 1:
        raise ConfigurationError(f"expected one image [C, H, W], got {image.shape}")
    return image


def _check_layer(model: DefocusNetwork, layer: int) -> None:
    if not 0 <= layer < model.config.depth:
        raise ConfigurationError(f"layer {layer} out of range for depth {model.config.depth}")


def layer_input(model: DefocusNetwork, image, layer: int) -> np.ndarray:
    """Token features entering block ``layer`` (inference mode, no tape)."""
    _check_layer(model, layer)
    with ad.no_grad():
        x = patch_embed(_as_batch(image), model).tokens
        for i in range(layer):
            x = model.block_forward(i, x)
    return x.data


def _token_norms(g: np.ndarray) -> np.ndarray:
    # hypot avoids squaring tiny gradients down to zero
    return np.hypot.reduce(g[0], axis=-1)


def receptive_field(model: DefocusNetwork, image, layer: int) -> DiagnosticMap:
    """Input-token gradient norms of ``||<CLS> output||`` for one block."""
    leaf = Tensor(layer_input(model, image, layer), requires_grad=True)
    out = model.block_forward(layer, leaf)
    (g,) = ad.grad(ad.l2_norm(out[0, -1]), [leaf])
    values, ok = _normalize(_token_norms(g))
    return DiagnosticMap("receptive_field", values, layer, ok)


def attention_map_approx(model: DefocusNetwork, image, layer: int) -> DiagnosticMap:
    """Row ``q`` holds input-token gradient norms of ``||output_q||``; diagonal zeroed."""
    x = layer_input(model, image, layer)
    n = x.shape[1]
    if n > MAX_MAP_TOKENS:
        raise ResourceError(f"attention map needs {n} backward passes; limit is {MAX_MAP_TOKENS} tokens")
    leaf = Tensor(x, requires_grad=True)
    out = model.block_forward(layer, leaf)
    rows = np.zeros((n, n))
    for q in range(n):
        (g,) = ad.grad(ad.l2_norm(out[0, q]), [leaf])
        rows[q] = _token_norms(g)
    np.fill_diagonal(rows, 0.0)
    values, ok = _normalize(rows)
    return DiagnosticMap("attention_map", values, layer, ok)


def gradient_map(model: DefocusNetwork, image, label: int, layer: int) -> DiagnosticMap:
    """Input-token gradient norms of the full training loss at block ``layer``."""
    leaf = Tensor(layer_input(model, image, layer), requires_grad=True)
    x = leaf
    for i in range(layer, model.config.depth):
        x = model.block_forward(i, x)
    cls_logits, aux_logits, _ = model.heads(model.final_norm(x))
    loss = total_loss(cls_logits, aux_logits, np.array([label]), model.config.aux_loss_weight)
    (g,) = ad.grad(loss, [leaf])
    values, ok = _normalize(_token_norms(g))
    return DiagnosticMap("gradient_map", values, layer, ok)


def gini(x) -> float:
    """Gini coefficient of a non-negative vector (0 = uniform, near 1 = one spike)."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n, total = x.size, x.sum()
    if n == 0 or total <= 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.sum(ranks * x) / (n * total) - (n + 1.0) / n)


def attention_gini(attention) -> float:
    """Mean per-row Gini over strictly-causal keys ``s < q`` of an attention map.

    Rows with fewer than two candidate keys are skipped.
    """
    a = np.asarray(attention.values if isinstance(attention, DiagnosticMap) else attention)
    scores = [gini(a[q, :q]) for q in range(2, a.shape[0])]
    return float(np.mean(scores)) if scores else 0.0


def rearrange_patches(grid_shape, section_side: int) -> np.ndarray:
    """Z-scan token order: sections of ``section_side``^2 patches, each flattened row-major."""
    hp, wp = (grid_shape, grid_shape) if isinstance(grid_shape, int) else tuple(grid_shape)
    if section_side < 1 or hp % section_side or wp % section_side:
        raise ConfigurationError(f"grid {hp}x{wp} is not divisible into {section_side}x{section_side} sections")
    idx = np.arange(hp * wp).reshape(hp // section_side, section_side, wp // section_side, section_side)
    return idx.transpose(0, 2, 1, 3).reshape(-1)


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


_FACTORS = {"r": 1, "r2": 2}


def transfer_resolution(checkpoint, r: float, decay_scale: str = "r", pos_scale: str = "r2") -> DefocusNetwork:
    """Adapt a model to an input ``r`` times larger per side.

    Per-step decays are softened by the ``decay_scale`` factor (``lambda / f``,
    i.e. ``lambda_hat - ln f``; for Mamba the step-size bias is moved so that
    ``softplus(bias)`` shrinks by ``f``), and rotary positions are multiplied by
    ``1 / f`` for the ``pos_scale`` factor.  ``r = 1`` returns an exact copy.
    Values of ``r`` below 1 undo an earlier transfer.
    """
    model = checkpoint if isinstance(checkpoint, DefocusNetwork) else load_checkpoint(checkpoint)
    if not (isinstance(r, (int, float)) and math.isfinite(r) and r > 0):
        raise ConfigurationError(f"ratio must be a positive finite number, got {r!r}")
    if decay_scale not in _FACTORS or pos_scale not in _FACTORS:
        raise ConfigurationError("decay_scale and pos_scale must each be 'r' or 'r2'")
    out = model.copy()
    if r == 1:
        return out
    fd, fp = r ** _FACTORS[decay_scale], r ** _FACTORS[pos_scale]
    for name, p in out.params.items():
        if name.endswith("filter/lambda_hat"):
            p.data = p.data - math.log(fd)
        elif name.endswith("ssm/delta_bias"):
            p.data = softplus_inverse(np.logaddexp(0.0, p.data) / fd)
    cfg = out.config
    cfg.position_scale = model.config.position_scale / fp
    size = cfg.image_size * r
    if abs(size - round(size)) > 1e-9 or round(size) % cfg.patch_size:
        raise ConfigurationError(f"image size {cfg.image_size} * {r} is not a whole number of patches")
    old_grid = cfg.grid
    cfg.image_size = int(round(size))
    if r > 1:
        # sections of the pre-train grid, each in the pre-train token order
        order = rearrange_patches(cfg.grid, old_grid).reshape(-1, old_grid * old_grid)
        if model.config.patch_order is not None:
            order = order[:, np.asarray(model.config.patch_order)]
        cfg.patch_order = [int(i) for i in order.ravel()]
    else:
        cfg.patch_order = None
    return out


# -- PGM / PPM and CSV ----------------------------------------------------------------------


def _pnm_tokens(raw: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated ASCII integers (skipping comments) from ``pos``."""
    vals = []
    n = len(raw)
    while len(vals) < count:
        while pos < n and (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
            if raw[pos:pos + 1] == b"#":
                while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"expected an integer at byte offset {start}")
        vals.append(int(raw[start:pos]))
    return vals, pos


def read_pnm(path) -> np.ndarray:
    """Read a P2/P5 (grey) or P3/P6 (colour) image as ``[C, H, W]`` floats in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image magic {magic!r} at byte offset 0")
    (w, h, maxval), pos = _pnm_tokens(raw, 3, 2)
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise FormatError(f"{path}: bad image header ({w}x{h}, maxval {maxval})")
    c = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * c
    if magic in (b"P2", b"P3"):
        vals, _ = _pnm_tokens(raw, count, pos)
        data = np.array(vals, dtype=np.float64)
    else:
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        need = count * dtype.itemsize
        if len(raw) - pos < need:
            raise FormatError(f"{path}: pixel data truncated at byte offset {len(raw)}, need {pos + need}")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float64)
    return (data.reshape(h, w, c).transpose(2, 0, 1)) / maxval


def write_pgm(path, values) -> None:
    """8-bit binary PGM of a 2-D field in [0, 1] (1-D fields become a single row)."""
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    px = np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def write_csv_map(path, values) -> None:
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    Path(path).write_text("".join(",".join(f"{x:.9g}" for x in row) + "\n" for row in v))
