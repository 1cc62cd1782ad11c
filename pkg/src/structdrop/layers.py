"""Layers with hand-written gradients and mask-aware matrix products.

Activations flow as (features, batch) columns through dense layers and the
LSTM; convolution unrolls its input through im2col and masks rows/blocks of
the unrolled matrix.  Every matrix product reports multiply-accumulate
counts to the iteration's MacCounter, split into dropout-eligible products
(those a mask can shrink) and the rest, so computation-reduction claims can
be audited from training logs.

Dropout placement: row/tile patterns zero the linear (pre-activation)
outputs, which for ReLU networks is exactly conventional post-activation
dropout (ReLU is positively homogeneous).  Scaling policy: the Bernoulli
dense baseline uses inverted dropout (kept units x 1/(1-rate) at train
time); pattern paths train unscaled and multiply by the expected keep
fraction at evaluation instead, because no constant train-time factor can
match patterns whose realized keep fraction swings with the sampled period.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .maskmm import CompactProduct, gather_rows, row_masked_matmul, scatter_rows, tile_masked_matmul
from .patterns import (BinaryMask, DropoutPattern, PatternKind, TileConfig,
                       mask_from_pattern, pattern_space)
from .search import PatternDistribution, neuron_drop_probability, sample_pattern
from .sensitivity import (SensitivityConfig, bsdp_select, block_drop_probabilities,
                          predict_sensitivity, row_drop_probabilities, rsdp_select)
from .tensor import ConvShape, col2im_batch, default_dtype, im2col_batch


class DropoutMode(str, Enum):
    NONE = "none"
    BERNOULLI = "bernoulli"
    APPROX_ROW = "approx_row"
    APPROX_TILE = "approx_tile"
    RSDP = "rsdp"
    BSDP = "bsdp"


@dataclass
class MacCounter:
    performed: int = 0
    dense: int = 0
    dropout_performed: int = 0
    dropout_dense: int = 0

    def add(self, performed: int, dense: int, dropout_eligible: bool) -> None:
        self.performed += performed
        self.dense += dense
        if dropout_eligible:
            self.dropout_performed += performed
            self.dropout_dense += dense

    def add_product(self, product: CompactProduct, dropout_eligible: bool) -> None:
        self.add(product.macs_performed, product.macs_dense, dropout_eligible)


@dataclass
class StepContext:
    """Per-iteration state threaded through forward/backward."""

    training: bool = False
    macs: MacCounter = field(default_factory=MacCounter)
    dropout_ratio: float | None = None  # schedule-driven ratio for RSDP/BSDP


def _transpose_tile_mask(mask: BinaryMask) -> BinaryMask:
    gr, gc = mask.grid_shape()
    return BinaryMask(PatternKind.TILE, mask.bits.reshape(gr, gc).T.ravel(),
                      mask.cols, mask.rows,
                      TileConfig(mask.tile.cols, mask.tile.rows))


def tile_output_product(a: np.ndarray, b: np.ndarray, mask: BinaryMask,
                        block_scale: np.ndarray | None = None,
                        counter: MacCounter | None = None,
                        dropout_eligible: bool = True) -> np.ndarray:
    """Product a @ b computed only for kept blocks of the OUTPUT tile grid.

    Used by backward passes where the mask lives on the result (weight
    gradients of tile-dropped layers, input gradients of block-dropped
    convolutions); dropped output blocks stay zero and cost nothing.
    """
    m, n = a.shape[0], b.shape[1]
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    if (mask.rows, mask.cols) != (m, n):
        raise ShapeError("mask geometry does not match the output dims")
    inner = a.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    macs = 0
    if mask.bits.size == 0:
        out[:] = a @ b
        macs = m * inner * n
    else:
        gr, gc = mask.grid_shape()
        tr, tc = mask.tile.rows, mask.tile.cols
        bits = mask.bits.reshape(gr, gc)
        scale = None if block_scale is None else np.asarray(block_scale, dtype=a.dtype).reshape(gr, gc)
        row_edge, col_edge = gr * tr, gc * tc
        for bi in range(gr):
            rows = slice(bi * tr, (bi + 1) * tr)
            kept = np.flatnonzero(bits[bi])
            if kept.size:
                cols = (kept[:, None] * tc + np.arange(tc)).ravel()
                block = a[rows] @ b[:, cols]
                if scale is not None:
                    block *= np.repeat(scale[bi, kept], tc)[None, :]
                out[np.ix_(np.arange(rows.start, rows.stop), cols)] = block
                macs += tr * inner * kept.size * tc
            if col_edge < n:
                out[rows, col_edge:] = a[rows] @ b[:, col_edge:]
                macs += tr * inner * (n - col_edge)
        if row_edge < m:
            out[row_edge:] = a[row_edge:] @ b
            macs += (m - row_edge) * inner * n
    if counter is not None:
        counter.add(macs, m * inner * n, dropout_eligible)
    return out


class DenseLayer:
    """Affine layer W @ x + b over (in_dim, batch) columns."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 mode: DropoutMode = DropoutMode.NONE, rate: float = 0.0,
                 distribution: PatternDistribution | None = None,
                 tile: TileConfig = TileConfig(), dropout_rng=None):
        dt = default_dtype()
        self.weight = (rng.standard_normal((out_dim, in_dim)) *
                       np.sqrt(2.0 / in_dim)).astype(dt)
        self.bias = np.zeros(out_dim, dtype=dt)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        if mode in (DropoutMode.RSDP, DropoutMode.BSDP):
            raise ParameterError("sensitivity modes apply to conv inputs only")
        self.mode = mode
        self.rate = rate
        self.distribution = distribution
        self.tile = tile
        self.dropout_rng = dropout_rng
        self._cache = None
        self._pattern: DropoutPattern | None = None

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return [(self.weight, self.d_weight), (self.bias, self.d_bias)]

    def pattern_space(self) -> int:
        kind = PatternKind.TILE if self.mode is DropoutMode.APPROX_TILE else PatternKind.ROW
        return pattern_space(kind, self.weight.shape[0], self.weight.shape[1], self.tile)

    def sample_iteration_pattern(self) -> DropoutPattern:
        kind = PatternKind.TILE if self.mode is DropoutMode.APPROX_TILE else PatternKind.ROW
        return sample_pattern(self.distribution, kind, self.weight.shape[0],
                              self.weight.shape[1], self.tile, self.dropout_rng)

    # -- explicit-pattern primitives ------------------------------------

    def forward_masked(self, x: np.ndarray, pattern: DropoutPattern,
                       scale: float = 1.0, counter: MacCounter | None = None) -> np.ndarray:
        """Masked affine forward; dropped rows (or tiles) contribute zero.

        Row patterns zero the whole unit including its bias; tile patterns
        drop synapse blocks, every unit stays live and biased.
        """
        counter = counter if counter is not None else MacCounter()
        mask = mask_from_pattern(pattern, self.weight.shape[0],
                                 self.weight.shape[1], self.tile)
        if pattern.kind is PatternKind.ROW:
            product = row_masked_matmul(self.weight, x, mask)
            z = product.output
            kept = mask.bits
            z += np.where(kept, self.bias, 0.0)[:, None]
            if scale != 1.0:
                z *= np.where(kept, scale, 0.0)[:, None].astype(z.dtype)
        else:
            product = tile_masked_matmul(self.weight, x, mask)
            z = product.output
            if scale != 1.0:
                z *= scale
            z += self.bias[:, None]
        counter.add_product(product, dropout_eligible=True)
        self._pattern = pattern
        self._cache = (x, mask, scale)
        return z

    def backward_masked(self, d_out: np.ndarray, pattern: DropoutPattern,
                        counter: MacCounter | None = None) -> np.ndarray:
        """Gradients for the preceding forward_masked call; dropped rows or
        tiles receive exactly zero weight gradient."""
        if self._pattern != pattern:
            raise StateError("backward pattern differs from the forward pattern")
        counter = counter if counter is not None else MacCounter()
        x, mask, scale = self._cache
        m, k = self.weight.shape
        batch = x.shape[1]
        if pattern.kind is PatternKind.ROW:
            kept = mask.bits
            dz = d_out * np.where(kept, scale, 0.0)[:, None]
            idx = mask.kept_indices()
            dz_kept = gather_rows(dz, idx)
            self.d_weight[:] = 0.0
            self.d_weight[idx] = dz_kept @ x.T
            counter.add(idx.size * batch * k, m * batch * k, True)
            self.d_bias[:] = dz.sum(axis=1)
            dx = gather_rows(self.weight, idx).T @ dz_kept
            counter.add(k * idx.size * batch, k * m * batch, True)
        else:
            dz = d_out * scale
            self.d_weight[:] = tile_output_product(
                dz, x.T, mask, counter=counter, dropout_eligible=True)
            self.d_bias[:] = d_out.sum(axis=1)  # bias is applied after the scale
            product = tile_masked_matmul(self.weight.T, dz, _transpose_tile_mask(mask))
            dx = product.output
            counter.add_product(product, dropout_eligible=True)
        return dx

    # -- training-path forward/backward ----------------------------------

    def forward(self, x: np.ndarray, ctx: StepContext) -> np.ndarray:
        """Dropout policy: the Bernoulli baseline uses inverted scaling
        (kept units x 1/(1-rate) at train time); pattern paths train
        unscaled and scale by the expected keep fraction at eval, since a
        constant train-time factor cannot match patterns whose realized
        keep fraction swings with the sampled period."""
        if not ctx.training or self.mode is DropoutMode.NONE:
            z = self.weight @ x + self.bias[:, None]
            factor = None
            if self.mode in (DropoutMode.APPROX_ROW, DropoutMode.APPROX_TILE):
                factor = 1.0 - neuron_drop_probability(self.distribution)
                z *= factor
            ctx.macs.add(self.weight.size * x.shape[1], self.weight.size * x.shape[1],
                         self.mode is not DropoutMode.NONE)
            self._cache = (x, factor, 1.0)
            self._pattern = None
            return z
        if self.mode is DropoutMode.BERNOULLI:
            z = self.weight @ x + self.bias[:, None]
            ctx.macs.add(self.weight.size * x.shape[1], self.weight.size * x.shape[1], True)
            keep = self.dropout_rng.random(z.shape) >= self.rate
            factor = keep / (1.0 - self.rate)
            z *= factor
            self._cache = (x, factor, 1.0)
            self._pattern = None
            return z
        pattern = self.sample_iteration_pattern()
        return self.forward_masked(x, pattern, 1.0, ctx.macs)

    def backward(self, d_out: np.ndarray, ctx: StepContext) -> np.ndarray:
        if self._pattern is not None:
            return self.backward_masked(d_out, self._pattern, ctx.macs)
        x, factor, _ = self._cache
        dz = d_out if factor is None else d_out * factor
        batch = x.shape[1]
        self.d_weight[:] = dz @ x.T
        self.d_bias[:] = dz.sum(axis=1)
        dx = self.weight.T @ dz
        eligible = self.mode is not DropoutMode.NONE
        ctx.macs.add(self.weight.size * batch, self.weight.size * batch, eligible)
        ctx.macs.add(self.weight.size * batch, self.weight.size * batch, eligible)
        return dx


class ReluLayer:
    def forward(self, x, ctx):
        self._mask = x > 0
        return x * self._mask

    def backward(self, d_out, ctx):
        return d_out * self._mask

    def params(self):
        return []


class SigmoidLayer:
    def forward(self, x, ctx):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, d_out, ctx):
        return d_out * self._y * (1.0 - self._y)

    def params(self):
        return []


class TanhLayer:
    def forward(self, x, ctx):
        self._y = np.tanh(x)
        return self._y

    def backward(self, d_out, ctx):
        return d_out * (1.0 - self._y * self._y)

    def params(self):
        return []


class SoftmaxCrossEntropy:
    """Softmax over the feature axis fused with mean cross-entropy."""

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        z = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=0, keepdims=True)
        batch = logits.shape[1]
        nll = -np.log(np.maximum(probs[labels, np.arange(batch)], 1e-300))
        self._probs, self._labels = probs, labels
        return float(nll.mean()), probs

    def backward(self) -> np.ndarray:
        probs, labels = self._probs, self._labels
        batch = probs.shape[1]
        grad = probs.copy()
        grad[labels, np.arange(batch)] -= 1.0
        return grad / batch


class ConvLayer:
    """Convolution via im2col with sensitivity-aware input-matrix dropout.

    The unrolled input (rows = batch x output positions) is the masked
    operand: RSDP drops rows, BSDP drops blocks balanced per row band, both
    scaled by the inverse keep probability so expectations match the dense
    pass.  The value threshold defaults to a running mean of |input matrix|
    refreshed every iteration.
    """

    def __init__(self, shape: ConvShape, rng: np.random.Generator,
                 mode: DropoutMode = DropoutMode.NONE,
                 sensitivity: SensitivityConfig | None = None,
                 tile: TileConfig = TileConfig(32, 8), dropout_rng=None):
        dt = default_dtype()
        self.shape = shape
        fan_in = shape.patch_size
        self.weight = (rng.standard_normal((shape.out_channels, fan_in)) *
                       np.sqrt(2.0 / fan_in)).astype(dt)
        self.bias = np.zeros(shape.out_channels, dtype=dt)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        if mode in (DropoutMode.APPROX_ROW, DropoutMode.APPROX_TILE, DropoutMode.BERNOULLI):
            raise ParameterError("conv layers take sensitivity dropout modes only")
        self.mode = mode
        self.sensitivity = sensitivity or SensitivityConfig()
        self.tile = tile
        self.dropout_rng = dropout_rng
        self.input_ablation = None  # hook for the sensitivity ablation studies
        self._theta_sum = 0.0
        self._theta_count = 0
        self._cache = None

    def params(self):
        return [(self.weight, self.d_weight), (self.bias, self.d_bias)]

    def _running_threshold(self, x_col: np.ndarray) -> float:
        batch_mean = float(np.abs(x_col).mean())
        theta = batch_mean if self._theta_count == 0 else self._theta_sum / self._theta_count
        self._theta_sum += batch_mean
        self._theta_count += 1
        return theta

    def _iteration_config(self, ratio: float, theta: float) -> SensitivityConfig:
        base = self.sensitivity
        return SensitivityConfig(
            region_rows=base.region_rows,
            region_cols=base.region_cols,
            sample_fraction=base.sample_fraction,
            vote_threshold=base.vote_threshold,
            value_threshold=theta,
            drop_prob_sensitive=min(base.drop_prob_sensitive, 0.5 * ratio),
            drop_prob_insensitive=ratio,
        )

    def forward(self, x: np.ndarray, ctx: StepContext) -> np.ndarray:
        self._ablation_mask = None
        if ctx.training and self.input_ablation is not None:
            self._ablation_mask = self.input_ablation(x, self.dropout_rng)
            x = x * self._ablation_mask
        n = x.shape[0]
        pos = self.shape.out_height * self.shape.out_width
        x_col = im2col_batch(x, self.shape).reshape(n * pos, self.shape.patch_size)
        ratio = ctx.dropout_ratio if ctx.dropout_ratio is not None else 0.0
        active = (ctx.training and self.mode in (DropoutMode.RSDP, DropoutMode.BSDP)
                  and ratio > 0.0)
        rows, patch = x_col.shape
        c_out = self.shape.out_channels
        if not active:
            out_mat = x_col @ self.weight.T + self.bias
            ctx.macs.add(rows * patch * c_out, rows * patch * c_out,
                         self.mode is not DropoutMode.NONE)
            self._cache = (x_col, None, None, n)
        else:
            theta = (self.sensitivity.value_threshold
                     if self.sensitivity.value_threshold is not None
                     else self._running_threshold(x_col))
            cfg = self._iteration_config(ratio, theta)
            smask = predict_sensitivity(x_col, cfg, self.dropout_rng)
            if self.mode is DropoutMode.RSDP:
                mask = rsdp_select(smask, x_col, self.dropout_rng)
                drop_p = row_drop_probabilities(smask, rows)
                row_scale = 1.0 / (1.0 - np.minimum(drop_p, 1.0 - 1e-9))
                product = row_masked_matmul(x_col, self.weight.T, mask, row_scale=row_scale)
                out_mat = product.output
                out_mat[mask.bits] += self.bias
                self._cache = (x_col, mask, row_scale, n)
            else:
                mask = bsdp_select(smask, rows, patch, self.tile, self.dropout_rng)
                if mask.bits.size:
                    drop_p = block_drop_probabilities(smask, rows, patch, self.tile)
                    block_scale = 1.0 / (1.0 - np.minimum(drop_p.ravel(), 1.0 - 1e-9))
                else:
                    block_scale = None
                product = tile_masked_matmul(x_col, self.weight.T, mask,
                                             tile_scale=block_scale)
                out_mat = product.output + self.bias
                self._cache = (x_col, mask, block_scale, n)
            ctx.macs.add_product(product, dropout_eligible=True)
        return out_mat.reshape(n, pos, c_out).transpose(0, 2, 1).reshape(
            n, c_out, self.shape.out_height, self.shape.out_width)

    def backward(self, d_out: np.ndarray, ctx: StepContext) -> np.ndarray:
        x_col, mask, scale, n = self._cache
        pos = self.shape.out_height * self.shape.out_width
        c_out = self.shape.out_channels
        rows, patch = x_col.shape
        d_mat = d_out.reshape(n, c_out, pos).transpose(0, 2, 1).reshape(rows, c_out)
        eligible = self.mode is not DropoutMode.NONE
        dense_macs = rows * patch * c_out
        if mask is None:
            self.d_weight[:] = d_mat.T @ x_col
            self.d_bias[:] = d_mat.sum(axis=0)
            dx_col = d_mat @ self.weight
            ctx.macs.add(dense_macs, dense_macs, eligible)
            ctx.macs.add(dense_macs, dense_macs, eligible)
        elif mask.granularity is PatternKind.ROW:
            idx = mask.kept_indices()
            d_kept = gather_rows(d_mat, idx)
            x_kept = gather_rows(x_col, idx) * scale[idx, None]
            self.d_weight[:] = d_kept.T @ x_kept
            self.d_bias[:] = d_kept.sum(axis=0)
            dx_col = scatter_rows((d_kept @ self.weight) * scale[idx, None], idx, rows)
            ctx.macs.add(idx.size * patch * c_out, dense_macs, True)
            ctx.macs.add(idx.size * patch * c_out, dense_macs, True)
        else:
            product = tile_masked_matmul(x_col.T, d_mat, _transpose_tile_mask(mask),
                                         tile_scale=None if scale is None else
                                         scale.reshape(mask.grid_shape()).T.ravel())
            self.d_weight[:] = product.output.T
            ctx.macs.add_product(product, dropout_eligible=True)
            self.d_bias[:] = d_mat.sum(axis=0)
            dx_col = tile_output_product(d_mat, self.weight, mask,
                                         block_scale=scale, counter=ctx.macs,
                                         dropout_eligible=True)
        dx = col2im_batch(dx_col.reshape(n, pos, patch), self.shape)
        if self._ablation_mask is not None:
            dx *= self._ablation_mask
        return dx


class LstmLayer:
    """Single LSTM layer over (T, input_dim, batch) sequences.

    Row patterns drop whole hidden units for the iteration: the four gate
    rows of a dropped unit are skipped in both weight products and the
    unit's cell and output are forced to zero, mirroring how a dropped
    neuron loses all its synapses.  Tile patterns drop synapse blocks of
    the fused gate weight instead.  The Bernoulli baseline applies the same
    unit semantics with an independent per-unit draw; one mask serves all
    time steps of an iteration.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator,
                 mode: DropoutMode = DropoutMode.NONE, rate: float = 0.0,
                 distribution: PatternDistribution | None = None,
                 tile: TileConfig = TileConfig(), dropout_rng=None):
        dt = default_dtype()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        cat = input_dim + hidden_dim
        self.weight = (rng.standard_normal((4 * hidden_dim, cat)) /
                       np.sqrt(cat)).astype(dt)
        self.bias = np.zeros(4 * hidden_dim, dtype=dt)
        # forget-gate bias starts positive so early memory survives
        self.bias[hidden_dim : 2 * hidden_dim] = 1.0
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        if mode in (DropoutMode.RSDP, DropoutMode.BSDP):
            raise ParameterError("sensitivity modes apply to conv inputs only")
        self.mode = mode
        self.rate = rate
        self.distribution = distribution
        self.tile = tile
        self.dropout_rng = dropout_rng
        self._cache = None

    def params(self):
        return [(self.weight, self.d_weight), (self.bias, self.d_bias)]

    def _unit_mask(self) -> tuple[np.ndarray, float]:
        h = self.hidden_dim
        if self.mode is DropoutMode.BERNOULLI:
            keep = self.dropout_rng.random(h) >= self.rate
            if not keep.any():
                keep[int(self.dropout_rng.integers(h))] = True
            return keep, 1.0
        pattern = sample_pattern(self.distribution, PatternKind.ROW, h, 1,
                                 self.tile, self.dropout_rng)
        return mask_from_pattern(pattern, h).bits, 1.0

    def _drop_rate(self) -> float:
        if self.distribution is not None:
            return neuron_drop_probability(self.distribution)
        return self.rate

    def forward(self, x_seq: np.ndarray, ctx: StepContext) -> np.ndarray:
        """Same dropout policy as DenseLayer: pattern and Bernoulli unit
        masks train unscaled; evaluation scales the hidden outputs (unit
        modes) or the gate products (tile mode) by the expected keep
        fraction."""
        t_steps, input_dim, batch = x_seq.shape
        if input_dim != self.input_dim:
            raise ShapeError(f"expected input dim {self.input_dim}, got {input_dim}")
        h = self.hidden_dim
        dt = self.weight.dtype
        unit_keep = np.ones(h, dtype=bool)
        scale = 1.0   # multiplies the gate product (tile mode / tile eval)
        h_factor = 1.0  # multiplies the hidden output (unit modes at eval)
        tile_msk = None
        if ctx.training and self.mode in (DropoutMode.BERNOULLI, DropoutMode.APPROX_ROW):
            unit_keep, _ = self._unit_mask()
        elif ctx.training and self.mode is DropoutMode.APPROX_TILE:
            pattern = sample_pattern(self.distribution, PatternKind.TILE,
                                     self.weight.shape[0], self.weight.shape[1],
                                     self.tile, self.dropout_rng)
            tile_msk = mask_from_pattern(pattern, self.weight.shape[0],
                                         self.weight.shape[1], self.tile)
        elif not ctx.training:
            if self.mode in (DropoutMode.BERNOULLI, DropoutMode.APPROX_ROW):
                h_factor = 1.0 - self._drop_rate()
            elif self.mode is DropoutMode.APPROX_TILE:
                scale = 1.0 - self._drop_rate()
        gate_keep = np.tile(unit_keep, 4)
        gate_mask = None
        if ctx.training and self.mode is DropoutMode.APPROX_ROW and not unit_keep.all():
            gate_mask = BinaryMask(PatternKind.ROW, gate_keep, 4 * h, 1)
        u = unit_keep.astype(dt)
        us = u * h_factor
        h_prev = np.zeros((h, batch), dtype=dt)
        c_prev = np.zeros((h, batch), dtype=dt)
        h_seq = np.empty((t_steps, h, batch), dtype=dt)
        steps = []
        dense_macs = self.weight.size * batch
        for t in range(t_steps):
            xh = np.concatenate([x_seq[t], h_prev], axis=0)
            if gate_mask is not None:
                product = row_masked_matmul(self.weight, xh, gate_mask)
                z = product.output + np.where(gate_keep, self.bias, 0.0)[:, None]
                ctx.macs.add_product(product, dropout_eligible=True)
            elif tile_msk is not None:
                product = tile_masked_matmul(self.weight, xh, tile_msk)
                z = product.output * scale + self.bias[:, None]
                ctx.macs.add_product(product, dropout_eligible=True)
            else:
                z = self.weight @ xh
                if scale != 1.0:
                    z *= scale
                z += self.bias[:, None]
                ctx.macs.add(dense_macs, dense_macs, self.mode is not DropoutMode.NONE)
            zi, zf, zg, zo = np.split(z, 4, axis=0)
            gi = 1.0 / (1.0 + np.exp(-zi))
            gf = 1.0 / (1.0 + np.exp(-zf))
            gg = np.tanh(zg)
            go = 1.0 / (1.0 + np.exp(-zo))
            c_t = (gf * c_prev + gi * gg) * u[:, None]
            tanh_c = np.tanh(c_t)
            h_t = go * tanh_c * us[:, None]
            steps.append((xh, gi, gf, gg, go, c_prev, tanh_c))
            h_seq[t] = h_t
            h_prev, c_prev = h_t, c_t
        self._cache = (steps, unit_keep, gate_keep, gate_mask, tile_msk, u, us, scale)
        return h_seq

    def backward(self, d_h_seq: np.ndarray, ctx: StepContext) -> np.ndarray:
        steps, unit_keep, gate_keep, gate_mask, tile_msk, u, us, scale = self._cache
        t_steps = len(steps)
        h = self.hidden_dim
        batch = d_h_seq.shape[2]
        dt = self.weight.dtype
        self.d_weight[:] = 0.0
        self.d_bias[:] = 0.0
        dx_seq = np.empty((t_steps, self.input_dim, batch), dtype=dt)
        dh_rec = np.zeros((h, batch), dtype=dt)
        dc_rec = np.zeros((h, batch), dtype=dt)
        idx = np.flatnonzero(gate_keep)
        dense_macs = self.weight.size * batch
        eligible = self.mode is not DropoutMode.NONE
        for t in range(t_steps - 1, -1, -1):
            xh, gi, gf, gg, go, c_prev, tanh_c = steps[t]
            dh = d_h_seq[t] + dh_rec
            d_go = dh * tanh_c * us[:, None]
            dc = dc_rec + dh * go * us[:, None] * (1.0 - tanh_c * tanh_c)
            dc_u = dc * u[:, None]
            d_gi = dc_u * gg
            d_gg = dc_u * gi
            d_gf = dc_u * c_prev
            dc_rec = dc_u * gf
            dz = np.concatenate([
                d_gi * gi * (1.0 - gi),
                d_gf * gf * (1.0 - gf),
                d_gg * (1.0 - gg * gg),
                d_go * go * (1.0 - go),
            ], axis=0)
            if gate_mask is not None:
                dz_kept = gather_rows(dz, idx)
                xh_k = dz_kept @ xh.T
                self.d_weight[idx] += xh_k
                self.d_bias[idx] += dz_kept.sum(axis=1)
                dxh = gather_rows(self.weight, idx).T @ dz_kept
                ctx.macs.add(idx.size * xh.shape[0] * batch, dense_macs, True)
                ctx.macs.add(idx.size * xh.shape[0] * batch, dense_macs, True)
            elif tile_msk is not None:
                dzs = dz * scale
                self.d_weight += tile_output_product(dzs, xh.T, tile_msk,
                                                     counter=ctx.macs,
                                                     dropout_eligible=True)
                self.d_bias += dz.sum(axis=1)  # bias is applied after the scale
                product = tile_masked_matmul(self.weight.T, dzs,
                                             _transpose_tile_mask(tile_msk))
                dxh = product.output
                ctx.macs.add_product(product, dropout_eligible=True)
            else:
                self.d_weight += dz @ xh.T
                self.d_bias += dz.sum(axis=1)
                dxh = self.weight.T @ dz
                ctx.macs.add(dense_macs, dense_macs, eligible)
                ctx.macs.add(dense_macs, dense_macs, eligible)
            dx_seq[t] = dxh[: self.input_dim]
            dh_rec = dxh[self.input_dim :]
        return dx_seq


def forward_dense_masked(layer: DenseLayer, x: np.ndarray, pattern: DropoutPattern,
                         scale: float = 1.0,
                         counter: MacCounter | None = None) -> np.ndarray:
    """Masked affine forward with an explicit pattern (no sampling)."""
    return layer.forward_masked(x, pattern, scale, counter)


def backward_dense_masked(layer: DenseLayer, d_out: np.ndarray,
                          pattern: DropoutPattern,
                          counter: MacCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(weight gradient, input gradient) for the preceding masked forward."""
    dx = layer.backward_masked(d_out, pattern, counter)
    return layer.d_weight.copy(), dx
