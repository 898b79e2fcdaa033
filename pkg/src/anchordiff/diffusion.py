"""Miniature latent denoiser with cross-attention conditioning.

The denoiser is an MLP-with-attention over a handful of hidden tokens,
small enough to train on one CPU core in seconds.  Its conditioning
path mirrors the adaptation strategy under test: after base training,
every weight is frozen except the key and value projections of the
cross-attention blocks, so new conditioning content can only enter by
re-describing the context, never by rewiring the network.
"""

import hashlib
import math

import numpy as np

from . import autodiff as ad


class NoiseSchedule:
    """Linear beta schedule with cached cumulative signal levels.

    The default endpoint is steep enough that the terminal signal level
    is near zero at toy step counts, so ancestral sampling may start
    from pure noise without a distribution mismatch.  The default start
    is large relative to full-scale practice for the same reason: with
    a short schedule, a near-zero first rate would leave a wide band of
    early steps whose corruption is too faint for any predictor to see.
    """

    def __init__(self, steps, beta_start=0.01, beta_end=0.1):
        if steps < 1:
            raise ad.ContractError("schedule needs at least one step")
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps)
        if not (0.0 < self.betas[0] and self.betas[-1] < 1.0):
            raise ad.ContractError("beta range must stay inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check_step(self, t):
        if not 1 <= t <= self.steps:
            raise ad.ContractError(f"step {t} outside [1, {self.steps}]")

    def noising(self, z0, t, eps):
        """Forward corruption: sqrt(a_bar)*z0 + sqrt(1 - a_bar)*eps."""
        self.check_step(t)
        if z0.shape != eps.shape:
            raise ad.ShapeError(f"noising: shapes differ, {z0.shape} vs {eps.shape}")
        ab = self.alpha_bars[t - 1]
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def sinusoidal_table(steps, dim):
    """Fixed sin/cos position code per schedule step, rows in [-1, 1]."""
    table = np.zeros((steps, dim))
    position = np.arange(1, steps + 1, dtype=np.float64).reshape(-1, 1)
    half = (dim + 1) // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = position * freq
    table[:, 0::2] = np.sin(angles)[:, : (dim + 1) // 2]
    table[:, 1::2] = np.cos(angles)[:, : dim // 2]
    return table


class CrossAttentionBlock:
    """Single-head cross-attention plus feed-forward, both with residuals.

    Queries come from the hidden tokens; keys and values from the
    conditioning context.  Context may have any row count, so fused
    (N-row) and concatenated (N+M-row) conditioning both flow through
    unchanged.  Only w_k and w_v stay trainable after the base freeze.
    """

    def __init__(self, context_dim, hidden_dim, attn_dim, ff_dim, rng, name):
        self.attn_dim = attn_dim
        self.w_q = ad.Parameter(rng.normal(hidden_dim, attn_dim, 1.0 / math.sqrt(hidden_dim)),
                                f"{name}.q")
        self.w_k = ad.Parameter(rng.normal(context_dim, attn_dim, 1.0 / math.sqrt(context_dim)),
                                f"{name}.k")
        self.w_v = ad.Parameter(rng.normal(context_dim, attn_dim, 1.0 / math.sqrt(context_dim)),
                                f"{name}.v")
        self.w_out = ad.Parameter(rng.normal(attn_dim, hidden_dim, 1.0 / math.sqrt(attn_dim)),
                                  f"{name}.out")
        self.ff_in = ad.Parameter(rng.normal(hidden_dim, ff_dim, 1.0 / math.sqrt(hidden_dim)),
                                  f"{name}.ff_in")
        self.ff_out = ad.Parameter(rng.normal(ff_dim, hidden_dim, 1.0 / math.sqrt(ff_dim)),
                                   f"{name}.ff_out")

    def params(self):
        return [self.w_q, self.w_k, self.w_v, self.w_out, self.ff_in, self.ff_out]

    def adapted_params(self):
        return [self.w_k, self.w_v]

    def attend(self, hidden, context):
        """Attention + output projection + residual, before the feed-forward."""
        q = ad.matmul(hidden, self.w_q)
        k = ad.matmul(context, self.w_k)
        v = ad.matmul(context, self.w_v)
        att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)),
                                       1.0 / math.sqrt(self.attn_dim)))
        out = ad.matmul(ad.matmul(att, v), self.w_out)
        return ad.add(hidden, out)

    def apply(self, hidden, context):
        h = self.attend(hidden, context)
        ff = ad.matmul(ad.tanh(ad.matmul(h, self.ff_in)), self.ff_out)
        return ad.add(h, ff)


class ToyDenoiser:
    """Noise predictor: project, two conditioned blocks, pool, read out.

    Construction leaves every parameter trainable so a base-competence
    phase can shape the whole network; `freeze_base` then locks all but
    the cross-attention key/value projections.
    """

    def __init__(self, context_dim, hidden_dim, latent_dim, hidden_tokens,
                 schedule, rng, blocks=2):
        self.context_dim = context_dim
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.hidden_tokens = hidden_tokens
        # Output preconditioning.  The context-blind optimum under a unit
        # isotropic prior is sqrt(1 - a_bar)*z_t, carried as a fixed skip.
        # The learned head predicts the residual against that skip in
        # units where its ideal value keeps a constant norm at every
        # step; the sqrt(a_bar) output scale maps it back to noise units.
        # With this scaling a zero head is exactly the blind optimum, a
        # perfect head cancels the noise exactly, and no step's loss
        # weighting can drown out the others during training.
        self.blind_scale = np.sqrt(1.0 - schedule.alpha_bars)
        self.correction_scale = np.sqrt(schedule.alpha_bars)
        self.input_maps = [
            ad.Parameter(rng.normal(latent_dim, hidden_dim, 1.0 / math.sqrt(latent_dim)),
                         f"denoiser.input{i}")
            for i in range(hidden_tokens)
        ]
        self.time_table = ad.Parameter(sinusoidal_table(schedule.steps, hidden_dim),
                                       "denoiser.time_table", trainable=False)
        self.blocks = [
            CrossAttentionBlock(context_dim, hidden_dim, hidden_dim, 2 * hidden_dim,
                                rng, f"denoiser.block{b}")
            for b in range(blocks)
        ]
        # Zero-started head: the preconditioned output scale amplifies
        # small-step mistakes, and a random head would be silenced by the
        # optimizer before it can learn, taking its upstream gradients
        # with it.  From zero it only ever grows along the signal.
        self.out_head = ad.Parameter(np.zeros((hidden_dim, latent_dim)),
                                     "denoiser.head")

    def params(self):
        out = [*self.input_maps, self.time_table]
        for b in self.blocks:
            out.extend(b.params())
        out.append(self.out_head)
        return out

    def adapted_params(self):
        """The only weights personalization may touch."""
        out = []
        for b in self.blocks:
            out.extend(b.adapted_params())
        return out

    def freeze_base(self):
        """Lock everything except the per-block key/value projections."""
        adapted = {id(p) for p in self.adapted_params()}
        for p in self.params():
            if id(p) not in adapted:
                p.freeze()

    def frozen_params(self):
        return [p for p in self.params() if not p.trainable]

    def frozen_digest(self):
        """Byte-exact hash of every non-trainable parameter, order-stable."""
        h = hashlib.sha256()
        for p in sorted(self.frozen_params(), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(p.value.tobytes())
        return h.hexdigest()

    def predict_noise(self, z_t, t, context):
        """Predicted corruption for latent z_t at schedule step t."""
        if not isinstance(z_t, ad.Tensor):
            z_t = ad.constant(z_t)
        if z_t.shape != (1, self.latent_dim):
            raise ad.ShapeError(f"latent must be 1x{self.latent_dim}, got {z_t.shape}")
        if context.cols != self.context_dim:
            raise ad.ShapeError(
                f"context width {context.cols} does not match {self.context_dim}")
        if not 1 <= t <= self.time_table.rows:
            raise ad.ContractError(f"step {t} outside the time table")
        hidden = ad.stack_rows([ad.matmul(z_t, m) for m in self.input_maps])
        hidden = ad.add(hidden, ad.slice_rows(self.time_table, t - 1, t))
        for block in self.blocks:
            hidden = block.apply(hidden, context)
        learned = ad.matmul(ad.mean_rows(hidden), self.out_head)
        return ad.add(ad.scale(z_t, float(self.blind_scale[t - 1])),
                      ad.scale(learned, -float(self.correction_scale[t - 1])))

    def sample(self, schedule, context, rng):
        """Ancestral reverse walk from pure noise to a clean latent."""
        z = rng.normal(1, self.latent_dim)
        for t in range(schedule.steps, 0, -1):
            eps_hat = self.predict_noise(z, t, context).value
            a = schedule.alphas[t - 1]
            ab = schedule.alpha_bars[t - 1]
            mean = (z - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
            if t > 1:
                mean = mean + math.sqrt(schedule.betas[t - 1]) * rng.normal(1, self.latent_dim)
            z = mean
        return z

    def clone(self):
        """Independent copy sharing no parameter storage."""
        dup = object.__new__(ToyDenoiser)
        dup.context_dim = self.context_dim
        dup.hidden_dim = self.hidden_dim
        dup.latent_dim = self.latent_dim
        dup.hidden_tokens = self.hidden_tokens
        dup.blind_scale = self.blind_scale.copy()
        dup.correction_scale = self.correction_scale.copy()
        dup.input_maps = [_copy_param(p) for p in self.input_maps]
        dup.time_table = _copy_param(self.time_table)
        dup.blocks = [_clone_block(b) for b in self.blocks]
        dup.out_head = _copy_param(self.out_head)
        return dup


def _copy_param(p):
    out = ad.Parameter(p.value.copy(), p.name, trainable=p.trainable)
    return out


def _clone_block(b):
    dup = object.__new__(CrossAttentionBlock)
    dup.attn_dim = b.attn_dim
    for field in ("w_q", "w_k", "w_v", "w_out", "ff_in", "ff_out"):
        setattr(dup, field, _copy_param(getattr(b, field)))
    return dup
