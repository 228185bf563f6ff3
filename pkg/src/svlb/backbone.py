"""Parallel-block vision-transformer backbones and analytic cost accounting.

Model naming grammar: ``ViT-<letter><layers>x<parallelism>`` where the
letter fixes (hidden, mlp, heads). A block applies its attention branches
in parallel and sums them into the residual, then does the same with its
MLP branches:

    x <- x + sum_c MHSA_c(LN_c(x))
    x <- x + sum_c MLP_c(LN'_c(x))

so a model with layers L and parallelism C has exactly the parameters and
FLOPs of one with layers L*C and parallelism 1.

Positional embeddings are a fixed 2-D sin-cos table over the patch grid
(not learned, but counted as an allocated tensor). There is no class
token; every output is a patch token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor,
    add,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)

# letter -> (hidden, mlp, heads)
LETTER_TABLE = {
    "B": (768, 3072, 12),
    "L": (1024, 4096, 16),
    "H": (1536, 6144, 16),
    "G": (2048, 8192, 32),
}

REGISTERED_MODELS = ("ViT-B12x1", "ViT-L12x4", "ViT-H12x4", "ViT-G12x4")

_NAME_RE = re.compile(r"^ViT-([A-Za-z])(\d+)x(\d+)$")


class ModelNameError(ValueError):
    """Model-name string does not follow the ViT-<letter><layers>x<parallelism> grammar."""


@dataclass
class BackboneConfig:
    hidden: int
    layers: int
    parallelism: int
    mlp: int
    heads: int
    patch: int = 16
    image: int = 224
    in_channels: int = 3
    family: str | None = None

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.image % self.patch != 0:
            raise ValueError(f"image {self.image} not divisible by patch {self.patch}")
        if self.layers < 1 or self.parallelism < 1:
            raise ValueError("layers and parallelism must be >= 1")

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_channels


@dataclass
class DecoderConfig:
    """Light reconstruction decoder; MLP size is fixed at 4x hidden."""

    hidden: int = 64
    layers: int = 2
    heads: int = 4

    @property
    def mlp(self) -> int:
        return 4 * self.hidden


@dataclass
class CostReport:
    params: int
    flops: int
    activation_bytes: int


def parse_model_name(name: str, patch: int = 16, image: int = 224) -> BackboneConfig:
    """Parse ``ViT-<letter><layers>x<parallelism>`` into a config."""
    m = _NAME_RE.match(name)
    if not m:
        raise ModelNameError(f"malformed model name {name!r}; expected ViT-<letter><layers>x<parallelism>")
    letter, layers, par = m.group(1), int(m.group(2)), int(m.group(3))
    if letter not in LETTER_TABLE:
        raise ModelNameError(f"unknown size letter {letter!r} in {name!r}; known: {sorted(LETTER_TABLE)}")
    if layers < 1 or par < 1:
        raise ModelNameError(f"layers/parallelism must be >= 1 in {name!r}")
    hidden, mlp, heads = LETTER_TABLE[letter]
    return BackboneConfig(hidden=hidden, layers=layers, parallelism=par, mlp=mlp,
                          heads=heads, patch=patch, image=image, family=letter)


def render_model_name(cfg: BackboneConfig) -> str:
    letter = cfg.family
    if letter is None:
        for cand, dims in LETTER_TABLE.items():
            if dims == (cfg.hidden, cfg.mlp, cfg.heads):
                letter = cand
                break
    if letter is None:
        raise ModelNameError(f"no size letter for dims ({cfg.hidden}, {cfg.mlp}, {cfg.heads})")
    return f"ViT-{letter}{cfg.layers}x{cfg.parallelism}"


def registry() -> dict[str, BackboneConfig]:
    return {name: parse_model_name(name) for name in REGISTERED_MODELS}


# ---------------------------------------------------------------------
# positional table
# ---------------------------------------------------------------------

def sincos_pos_table(grid: int, hidden: int) -> np.ndarray:
    """Fixed 2-D sin-cos positional table, shape [grid*grid, hidden].

    Half the channels encode the row coordinate and half the column, each
    as interleaved sin/cos pairs; hidden must be divisible by 4.
    """
    if hidden % 4 != 0:
        raise ValueError(f"sin-cos table needs hidden % 4 == 0, got {hidden}")
    half = hidden // 2
    omega = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
    coords = np.arange(grid, dtype=np.float64)
    rows, cols = np.meshgrid(coords, coords, indexing="ij")

    def encode(p):
        angles = p.reshape(-1, 1) * omega.reshape(1, -1)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    table = np.concatenate([encode(rows.reshape(-1)), encode(cols.reshape(-1))], axis=1)
    return table.astype(np.float32)


# ---------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------

_INIT_STD = 0.02


def _weight(rng: Rng, name: str, shape, dtype) -> Tensor:
    data = np.asarray(rng.split(name).normal(shape), dtype=dtype) * dtype(_INIT_STD)
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_backbone(cfg: BackboneConfig, rng: Rng, dtype=np.float32) -> dict[str, Tensor]:
    """Allocate every encoder tensor, keyed by canonical name.

    The ``pos`` entry is a fixed buffer (requires_grad False); everything
    else is trainable. Weight values depend only on (seed, tensor name).
    """
    dtype = np.dtype(dtype).type
    h, m = cfg.hidden, cfg.mlp
    p: dict[str, Tensor] = {}
    p["patch_embed.w"] = _weight(rng, "patch_embed.w", (cfg.patch_dim, h), dtype)
    p["patch_embed.b"] = _zeros((h,), dtype)
    p["pos"] = Tensor(sincos_pos_table(cfg.grid, h).astype(dtype), requires_grad=False)
    for l in range(1, cfg.layers + 1):
        for c in range(cfg.parallelism):
            pf = f"block{l}.branch{c}"
            p[f"{pf}.ln1.g"] = _ones((h,), dtype)
            p[f"{pf}.ln1.b"] = _zeros((h,), dtype)
            p[f"{pf}.qkv.w"] = _weight(rng, f"{pf}.qkv.w", (h, 3 * h), dtype)
            p[f"{pf}.qkv.b"] = _zeros((3 * h,), dtype)
            p[f"{pf}.proj.w"] = _weight(rng, f"{pf}.proj.w", (h, h), dtype)
            p[f"{pf}.proj.b"] = _zeros((h,), dtype)
            p[f"{pf}.ln2.g"] = _ones((h,), dtype)
            p[f"{pf}.ln2.b"] = _zeros((h,), dtype)
            p[f"{pf}.fc1.w"] = _weight(rng, f"{pf}.fc1.w", (h, m), dtype)
            p[f"{pf}.fc1.b"] = _zeros((m,), dtype)
            p[f"{pf}.fc2.w"] = _weight(rng, f"{pf}.fc2.w", (m, h), dtype)
            p[f"{pf}.fc2.b"] = _zeros((h,), dtype)
    p["norm.g"] = _ones((h,), dtype)
    p["norm.b"] = _zeros((h,), dtype)
    return p


def model_param_total(params: dict[str, Tensor]) -> int:
    """Enumeration oracle: sum of every allocated tensor's size."""
    return int(sum(t.size for t in params.values()))


# ---------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------

def attention_tokens(xn: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over [T, hidden] tokens."""
    t, h = xn.shape
    hd = h // heads
    qkv = add(matmul(xn, params[f"{prefix}.qkv.w"]), params[f"{prefix}.qkv.b"])
    qkv = transpose(reshape(qkv, (t, 3, heads, hd)), (1, 2, 0, 3))
    flat = reshape(qkv, (3, heads * t * hd))
    q = reshape(gather_rows(flat, [0]), (heads, t, hd))
    k = reshape(gather_rows(flat, [1]), (heads, t, hd))
    v = reshape(gather_rows(flat, [2]), (heads, t, hd))
    att = softmax(scale(matmul(q, transpose(k, (0, 2, 1))), hd**-0.5))
    out = reshape(transpose(matmul(att, v), (1, 0, 2)), (t, h))
    return add(matmul(out, params[f"{prefix}.proj.w"]), params[f"{prefix}.proj.b"])


def mlp_tokens(xn: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = gelu(add(matmul(xn, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    return add(matmul(hidden, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


def encoder_block(params, cfg: BackboneConfig, layer: int, x: Tensor,
                  attn_fn=None, branch_transform=None) -> Tensor:
    """One parallel block: summed attention branches, then summed MLP branches.

    ``attn_fn(xn, params, prefix, heads)`` overrides the attention stage
    (windowed attention); ``branch_transform`` wraps each branch output
    (drop path).
    """
    attn = attn_fn or attention_tokens
    total = None
    for c in range(cfg.parallelism):
        pf = f"block{layer}.branch{c}"
        xn = layer_norm(x, params[f"{pf}.ln1.g"], params[f"{pf}.ln1.b"])
        a = attn(xn, params, pf, cfg.heads)
        if branch_transform is not None:
            a = branch_transform(a)
        total = a if total is None else add(total, a)
    x = add(x, total)
    total = None
    for c in range(cfg.parallelism):
        pf = f"block{layer}.branch{c}"
        xn = layer_norm(x, params[f"{pf}.ln2.g"], params[f"{pf}.ln2.b"])
        m = mlp_tokens(xn, params, pf)
        if branch_transform is not None:
            m = branch_transform(m)
        total = m if total is None else add(total, m)
    return add(x, total)


def backbone_forward(params, cfg: BackboneConfig, tokens: Tensor, pos: Tensor | None = None) -> Tensor:
    """Run all blocks plus the final layer norm over embedded tokens.

    ``tokens`` are already patch-embedded, [N, hidden] with N at most the
    full patch grid; pass ``pos`` to add a positional table here instead
    of at embedding time.
    """
    if tokens.ndim != 2 or tokens.shape[1] != cfg.hidden:
        raise ValueError(f"tokens must be [N, {cfg.hidden}], got {tokens.shape}")
    if tokens.shape[0] > cfg.tokens:
        raise ValueError(f"{tokens.shape[0]} tokens exceed the {cfg.grid}x{cfg.grid} patch grid")
    x = tokens if pos is None else add(tokens, pos)
    for l in range(1, cfg.layers + 1):
        x = encoder_block(params, cfg, l, x)
    return layer_norm(x, params["norm.g"], params["norm.b"])


# ---------------------------------------------------------------------
# analytic accounting
# ---------------------------------------------------------------------

def count_params(cfg: BackboneConfig, include: str = "encoder",
                 decoder: DecoderConfig | None = None) -> int:
    """Closed-form parameter count; equals the enumeration oracle exactly.

    Encoder terms: patch embed (patch^2*in_ch*h + h) + positional table
    (grid^2*h) + layers*parallelism per-branch
    (4h^2 + 4h qkv/proj, 2hm + h + m MLP, 4h two LN pairs) + final LN 2h.
    ``include`` is "encoder" or "encoder+decoder" (reconstruction decoder:
    embed, mask token, pos table, serial blocks with mlp 4x, final LN,
    pixel projection).
    """
    h, m = cfg.hidden, cfg.mlp
    branch = 4 * h * h + 4 * h + 2 * h * m + h + m + 4 * h
    total = (cfg.patch_dim * h + h) + cfg.tokens * h + cfg.layers * cfg.parallelism * branch + 2 * h
    if include == "encoder":
        return total
    if include != "encoder+decoder":
        raise ValueError(f"include must be 'encoder' or 'encoder+decoder', got {include!r}")
    d = decoder or DecoderConfig()
    hd, md = d.hidden, d.mlp
    dec_branch = 4 * hd * hd + 4 * hd + 2 * hd * md + hd + md + 4 * hd
    total += (h * hd + hd) + hd + cfg.tokens * hd + d.layers * dec_branch + 2 * hd
    total += hd * cfg.patch_dim + cfg.patch_dim
    return total


def estimate_flops(cfg: BackboneConfig, tokens: int) -> int:
    """Forward FLOPs with the 1 multiply-accumulate = 2 FLOPs convention.

    Per block-branch: 2t(4h^2 + 2hm) for qkv/proj/fc1/fc2 plus 4t^2h for
    attention scores and value mixing; softmax and normalization
    divisions are ignored, final LN is charged its affine (2th), and the
    patch embedding is 2t*patch_dim*h. The total is linear in
    layers*parallelism, so (L, C) and (L*C, 1) cost the same.
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    h, m = cfg.hidden, cfg.mlp
    branch = 2 * tokens * (4 * h * h + 2 * h * m) + 4 * tokens * tokens * h
    return cfg.layers * cfg.parallelism * branch + 2 * tokens * cfg.patch_dim * h + 2 * tokens * h


def _branch_activation_elems(cfg: BackboneConfig, tokens: int) -> int:
    # stored per branch: ln1 h, qkv 3h, proj h, ln2 h, fc1 m, gelu m, fc2 h
    # plus attention scores and their softmax (2 * heads * t^2)
    return tokens * (7 * cfg.hidden + 2 * cfg.mlp) + 2 * cfg.heads * tokens * tokens


def activation_bytes(cfg: BackboneConfig, tokens: int, batch: int,
                     dtype: str = "fp32", checkpointing: bool = False) -> int:
    """Peak activation estimate for one forward pass (training retention).

    Without checkpointing every block keeps its intermediates; with it,
    only each block's input plus one live block's intermediates remain.
    """
    bpe = {"fp32": 4, "fp16": 2}[dtype]
    a = _branch_activation_elems(cfg, tokens)
    embed = tokens * cfg.hidden
    if checkpointing:
        elems = cfg.layers * tokens * cfg.hidden + cfg.parallelism * a + embed
    else:
        elems = cfg.layers * cfg.parallelism * a + embed
    return batch * elems * bpe


def estimate_memory(cfg: BackboneConfig, tokens: int, batch: int,
                    dtype: str = "fp32", checkpointing: bool = False) -> int:
    """Total training-memory estimate in bytes.

    Weights and gradients are held at ``dtype`` width; the two optimizer
    moments are always kept in fp32 master precision. Activations follow
    ``activation_bytes``. This is an estimate only; nothing here executes
    in reduced precision.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    bpe = {"fp32": 4, "fp16": 2}[dtype]
    params = count_params(cfg, "encoder")
    state = params * bpe * 2 + params * 4 * 2
    return state + activation_bytes(cfg, tokens, batch, dtype, checkpointing)


def cost_report(cfg: BackboneConfig, tokens: int | None = None, batch: int = 1,
                dtype: str = "fp32", checkpointing: bool = False) -> CostReport:
    t = cfg.tokens if tokens is None else tokens
    return CostReport(
        params=count_params(cfg, "encoder"),
        flops=estimate_flops(cfg, t),
        activation_bytes=activation_bytes(cfg, t, batch, dtype, checkpointing),
    )
