"""Patch-sequence encoder: class token, transformer blocks, LSTM summary.

The forward path maps a perturbed N x D patch sequence to a d-dimensional
representation: a learnable class-token row is prepended and a learnable
positional table added, the sequence passes through pre-norm transformer
blocks, a two-layer LSTM consumes the rows with the class token fed last,
and a three-layer MLP expands the final cell state to the latent.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import add_noise, mask_patches, patchify


@dataclass(frozen=True)
class EncoderConfig:
    D: int = 40
    N: int = 190
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 0.8
    dropout: float = 0.1
    lstm_layers: int = 2
    lstm_hidden: int = 40
    latent_dim: int = 128
    head_widths: tuple = (64, 96)

    def __post_init__(self):
        if self.D <= 0 or self.N <= 0 or self.depth <= 0 or self.heads <= 0:
            raise ValueError("all encoder dimensions must be positive")
        if self.D % self.heads != 0:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if len(self.head_widths) != 2:
            raise ValueError("latent head takes exactly two hidden widths")

    @property
    def head_dim(self):
        return self.D // self.heads

    @property
    def mlp_hidden(self):
        return int(round(self.mlp_ratio * self.D))


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_block(params, prefix, rng, D, heads, head_dim, hidden):
    params[f"{prefix}.ln1.gain"] = T.Parameter(np.ones((1, D)), f"{prefix}.ln1.gain")
    params[f"{prefix}.ln1.bias"] = T.Parameter(np.zeros((1, D)), f"{prefix}.ln1.bias")
    params[f"{prefix}.ln2.gain"] = T.Parameter(np.ones((1, D)), f"{prefix}.ln2.gain")
    params[f"{prefix}.ln2.bias"] = T.Parameter(np.zeros((1, D)), f"{prefix}.ln2.bias")
    for h in range(heads):
        name = f"{prefix}.head{h}.qkv"
        params[name] = T.Parameter(
            xavier_uniform(rng, (D, 3 * head_dim), D, 3 * head_dim), name
        )
    params[f"{prefix}.proj"] = T.Parameter(
        xavier_uniform(rng, (heads * head_dim, D), heads * head_dim, D),
        f"{prefix}.proj",
    )
    params[f"{prefix}.mlp.w1"] = T.Parameter(
        xavier_uniform(rng, (D, hidden), D, hidden), f"{prefix}.mlp.w1"
    )
    params[f"{prefix}.mlp.b1"] = T.Parameter(np.zeros((1, hidden)), f"{prefix}.mlp.b1")
    params[f"{prefix}.mlp.w2"] = T.Parameter(
        xavier_uniform(rng, (hidden, D), hidden, D), f"{prefix}.mlp.w2"
    )
    params[f"{prefix}.mlp.b2"] = T.Parameter(np.zeros((1, D)), f"{prefix}.mlp.b2")


def init_encoder_params(cfg, rng):
    """Fresh encoder parameters, deterministic given the rng state."""
    params = {}
    params["enc.class_token"] = T.Parameter(
        rng.normal(0.0, 0.02, size=(1, cfg.D)), "enc.class_token"
    )
    params["enc.pos_encoding"] = T.Parameter(
        rng.normal(0.0, 0.02, size=(cfg.N + 1, cfg.D)), "enc.pos_encoding"
    )
    for b in range(cfg.depth):
        _init_block(params, f"enc.block{b}", rng, cfg.D, cfg.heads,
                    cfg.head_dim, cfg.mlp_hidden)
    width_in = cfg.D
    for layer in range(cfg.lstm_layers):
        h = cfg.lstm_hidden
        params[f"enc.lstm{layer}.w_ih"] = T.Parameter(
            xavier_uniform(rng, (width_in, 4 * h), width_in, 4 * h),
            f"enc.lstm{layer}.w_ih",
        )
        params[f"enc.lstm{layer}.w_hh"] = T.Parameter(
            xavier_uniform(rng, (h, 4 * h), h, 4 * h), f"enc.lstm{layer}.w_hh"
        )
        params[f"enc.lstm{layer}.bias"] = T.Parameter(
            np.zeros((1, 4 * h)), f"enc.lstm{layer}.bias"
        )
        width_in = h
    widths = (cfg.lstm_hidden,) + tuple(cfg.head_widths) + (cfg.latent_dim,)
    for i in range(3):
        params[f"enc.latent.w{i}"] = T.Parameter(
            xavier_uniform(rng, (widths[i], widths[i + 1]), widths[i], widths[i + 1]),
            f"enc.latent.w{i}",
        )
        params[f"enc.latent.b{i}"] = T.Parameter(
            np.zeros((1, widths[i + 1])), f"enc.latent.b{i}"
        )
    return params


def preprocess(xp_masked, params):
    """Prepend the class-token row, then add the positional table."""
    if not isinstance(xp_masked, T.Tensor):
        xp_masked = T.Tensor(xp_masked)
    seq = T.concat_rows([params["enc.class_token"], xp_masked])
    return T.add(seq, params["enc.pos_encoding"])


def msa(x, params, prefix, cfg):
    """Multi-headed self-attention over the rows of x."""
    dh = cfg.head_dim
    qkv_w = T.concat_cols(
        [params[f"{prefix}.head{h}.qkv"] for h in range(cfg.heads)]
    )
    qkv = T.matmul(x, qkv_w)
    heads_out = []
    for h in range(cfg.heads):
        base = 3 * dh * h
        q = T.slice_cols(qkv, base, base + dh)
        k = T.slice_cols(qkv, base + dh, base + 2 * dh)
        v = T.slice_cols(qkv, base + 2 * dh, base + 3 * dh)
        logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        heads_out.append(T.matmul(T.softmax_rows(logits), v))
    return T.matmul(T.concat_cols(heads_out), params[f"{prefix}.proj"])


def transformer_block(x, params, prefix, cfg, train_mode=False, rng=None):
    """Pre-norm residual block: attention branch, then MLP branch."""
    attn = msa(T.layer_norm(x, params[f"{prefix}.ln1.gain"],
                            params[f"{prefix}.ln1.bias"]), params, prefix, cfg)
    attn = T.dropout(attn, cfg.dropout, train_mode, rng)
    x = T.add(x, attn)
    h = T.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h = T.gelu(T.add(T.matmul(h, params[f"{prefix}.mlp.w1"]),
                     params[f"{prefix}.mlp.b1"]))
    h = T.dropout(h, cfg.dropout, train_mode, rng)
    h = T.add(T.matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return T.add(x, h)


def lstm_traverse(seq, params, cfg):
    """Two stacked LSTM passes over the rows, class token (row 0) fed last.

    Returns the final cell state of the top layer.
    """
    n_rows = seq.shape[0]
    order = list(range(1, n_rows)) + [0]
    inputs = [T.slice_rows(seq, i, i + 1) for i in order]
    cell = None
    for layer in range(cfg.lstm_layers):
        w_ih = params[f"enc.lstm{layer}.w_ih"]
        w_hh = params[f"enc.lstm{layer}.w_hh"]
        bias = params[f"enc.lstm{layer}.bias"]
        h = T.Tensor(np.zeros((1, cfg.lstm_hidden)))
        c = T.Tensor(np.zeros((1, cfg.lstm_hidden)))
        outputs = []
        for x_t in inputs:
            hc = T.lstm_cell(x_t, h, c, w_ih, w_hh, bias)
            h = T.slice_rows(hc, 0, 1)
            c = T.slice_rows(hc, 1, 2)
            outputs.append(h)
        inputs = outputs
        cell = c
    return cell


def latent_head(cell, params):
    """Three fully connected layers with GELU between them."""
    z = cell
    for i in range(3):
        z = T.add(T.matmul(z, params[f"enc.latent.w{i}"]),
                  params[f"enc.latent.b{i}"])
        if i < 2:
            z = T.gelu(z)
    return z


def run_encoder(xp_masked, params, cfg, train_mode=False, rng=None):
    """Patch rows -> (latent 1 x d, post-transformer class-token row 1 x D)."""
    seq = preprocess(xp_masked, params)
    for b in range(cfg.depth):
        seq = transformer_block(seq, params, f"enc.block{b}", cfg, train_mode, rng)
    class_row = T.slice_rows(seq, 0, 1)
    latent = latent_head(lstm_traverse(seq, params, cfg), params)
    return latent, class_row


def encode(x, perturb, params, cfg, grid, train_mode=False, rng=None):
    """Full monitoring matrix -> latent, with optional perturbation.

    ``perturb`` of None patchifies x directly with an empty mask; otherwise
    noise and patch masking are applied with ``rng`` before encoding.
    """
    if perturb is None:
        xp = patchify(x, grid)
        mask = np.zeros(grid.N, dtype=bool)
    else:
        noisy = add_noise(x, perturb.snr_db, rng)
        xp, mask = mask_patches(patchify(noisy, grid), perturb.ratio_pad, rng)
    latent, class_row = run_encoder(xp, params, cfg, train_mode, rng)
    return latent, class_row, mask
