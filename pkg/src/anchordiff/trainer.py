"""Two-phase training: base competence, then per-identity personalization.

The base phase teaches an all-trainable denoiser to read its context:
random identities rendered as name tokens in the two leading slots,
random scenes behind them, clean latents blending both.  After that the
denoiser is frozen down to its cross-attention key/value projections,
standing in for a pretrained model.

Personalization then optimizes, per ablation mode, some subset of: the
two concept token rows, the enhancer, the adapter, a plain linear face
projection, and the denoiser's key/value projections.  All modes build
identical components from identical rng streams; they differ only in
which parameters the optimizer touches and how the context is fused.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import GatedContextAdapter
from .config import MODES, ExperimentConfig
from .diffusion import NoiseSchedule, ToyDenoiser
from .embedding import IdentityWorld, TextEncoder, TokenEmbeddingTable, sample_scene
from .enhancer import IdentityEnhancer


def init_concept_tokens(anchor_rows, rng, noise):
    """Concept token rows: the anchor plus a small gaussian offset."""
    if noise < 0:
        raise ad.ContractError("init noise must be non-negative")
    offset = rng.normal(*anchor_rows.shape, std=noise) if noise > 0 else 0.0
    return anchor_rows + offset


class Adam:
    """Adam with bias correction; skips parameters frozen mid-run."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first = [np.zeros_like(p.value) for p in self.params]
        self.second = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.first, self.second):
            if not p.trainable:
                continue
            g = p.grad
            m[:] = self.beta1 * m + (1.0 - self.beta1) * g
            v[:] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    """Plain gradient descent, for gradient-audit runs."""

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.trainable:
                p.value -= self.lr * p.grad


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return Sgd(params, lr)
    raise ad.ContractError(f"unknown optimizer {name!r}")


@dataclass
class BaseBundle:
    """Everything shared by all ablation modes at one seed."""
    config: ExperimentConfig
    table: TokenEmbeddingTable
    anchor: np.ndarray
    world: IdentityWorld
    encoder: TextEncoder
    schedule: NoiseSchedule
    denoiser: ToyDenoiser
    enhancer: IdentityEnhancer
    adapter: GatedContextAdapter
    scene_train: np.ndarray
    scene_eval: np.ndarray
    face_obs: np.ndarray
    z0_ref: np.ndarray
    base_final_loss: float


@dataclass
class TrainState:
    """One mode's trainable view over a BaseBundle."""
    config: ExperimentConfig
    mode: str
    world: IdentityWorld
    anchor: np.ndarray
    encoder: TextEncoder
    schedule: NoiseSchedule
    denoiser: ToyDenoiser
    scene_train: np.ndarray
    scene_eval: np.ndarray
    face_obs: ad.Tensor
    z0_ref: np.ndarray
    concept_tokens: ad.Parameter
    enhancer: IdentityEnhancer
    adapter: GatedContextAdapter
    face_linear: ad.Parameter
    trained: bool = False


@dataclass
class TrainReport:
    mode: str
    seed: int
    loss_curve: list
    final_loss: float
    initial_loss: float
    frozen_digest_before: str
    frozen_digest_after: str
    elapsed_s: float
    generator: str
    config: ExperimentConfig
    metrics: dict = field(default_factory=dict)


def pretrain_denoiser(denoiser, schedule, world, encoder, anchor, cfg, rng):
    """Teach the all-trainable denoiser to decode (identity, scene) contexts.

    Contexts come in three presentations.  A name presentation, the
    most frequent, carries the identity as name token rows; reading
    those is the core skill personalization relies on, so it gets the
    majority of steps.  An alignment presentation carries the identity
    as anchor rows shifted toward the mean enhanced face row, which is
    the shape an alignment-trained concept embedding converges to.  A
    fusion presentation carries it only through the gated adapter echo
    of enhanced face rows, at an opening drawn fresh each step so the
    channel stays readable at small amplitudes.
    The enhancer and adapter train jointly with the denoiser over
    random identities with noisy face observations.  The result is a
    base that can read every identity pathway a personalization mode
    later exercises; rows outside the enhanced span stay unreadable.
    """
    root = ad.Rng(cfg.seed, "root")
    enhancer = IdentityEnhancer(cfg.dim, cfg.heads, anchor, root.stream("enhancer"))
    adapter = GatedContextAdapter(cfg.dim, cfg.heads, cfg.beta_adapter,
                                  root.stream("adapter"),
                                  double_attention=cfg.double_attention)
    fusion_params = [p for p in enhancer.params() + adapter.params()
                     if p is not adapter.gate]
    params = [p for p in denoiser.params() if p.trainable] + fusion_params
    opt = Adam(params, cfg.pretrain_lr)
    scene_rows = cfg.text_tokens - 2
    anchor_mean = anchor.mean(axis=0, keepdims=True)
    # keeps enhanced rows on the anchor's scale so they stay close to
    # the text-token manifold instead of growing into a louder channel
    anchor_pull = ad.constant(np.repeat(anchor_mean, cfg.face_rows, axis=0))
    loss_value = float("nan")
    for step in range(cfg.pretrain_steps):
        opt.lr = cfg.pretrain_lr * 0.5 * (
            1.0 + math.cos(math.pi * step / cfg.pretrain_steps))
        u = world.sample_identity(rng)
        scene = sample_scene(scene_rows, cfg.dim, rng)
        variant = int(rng.integers(0, 4, 1)[0])
        face = ad.constant(world.encode_face(u, rng, cfg.noise_scale))
        enhanced = enhancer.enhance(face)
        if variant == 3:
            shift = enhanced.value.mean(axis=0, keepdims=True) - anchor_mean
            name_rows = anchor + shift
        elif variant <= 2:
            name_rows = world.name_tokens(u)
        else:
            name_rows = anchor
        slots = np.concatenate([name_rows, scene], axis=0)
        encoded = ad.constant(encoder.encode_array(slots))
        if variant == 4:
            opening = 0.05 + 0.01 * float(rng.integers(0, 30, 1)[0])
            adapter.gate.value = np.array([[math.atanh(opening)]])
            context = adapter.adapt(encoded, enhanced)
        else:
            context = encoded
        z0 = world.target_latent(u, scene)
        total = None
        for t in stratified_steps(schedule.steps, cfg.pretrain_batch, rng):
            eps = rng.normal(1, cfg.latent_dim)
            z_t = schedule.noising(z0, t, eps)
            item = ad.mse(denoiser.predict_noise(z_t, t, context), ad.constant(eps))
            total = item if total is None else ad.add(total, item)
        loss = ad.scale(total, 1.0 / cfg.pretrain_batch)
        loss = ad.add(loss, ad.scale(ad.mse(enhanced, anchor_pull), 0.1))
        ad.zero_grads(params)
        ad.backward(loss)
        opt.step()
        loss_value = loss.item()
    adapter.gate.value = np.array([[0.0]])
    return loss_value, enhancer, adapter


def build_base(cfg):
    """Construct and base-train the world shared by every mode at cfg.seed."""
    root = ad.Rng(cfg.seed, "root")
    table = TokenEmbeddingTable(cfg.table_size, cfg.dim, root.stream("table"),
                                cfg.name_concentration)
    anchor = table.anchor()
    world = IdentityWorld(cfg.identity_dim, cfg.dim, cfg.latent_dim, cfg.face_rows,
                          root.stream("world"), cfg.id_weight, cfg.prompt_weight,
                          cfg.target_scale, table.centers, cfg.name_concentration)
    encoder = TextEncoder(cfg.text_tokens, cfg.mix_strength, root.stream("encoder"))
    schedule = NoiseSchedule(cfg.time_steps)
    denoiser = ToyDenoiser(cfg.dim, cfg.hidden_dim, cfg.latent_dim,
                           cfg.hidden_tokens, schedule, root.stream("denoiser"))
    base_loss = float("nan")
    if cfg.pretrain_steps > 0:
        base_loss, enhancer, adapter = pretrain_denoiser(
            denoiser, schedule, world, encoder, anchor, cfg,
            root.stream("base-train"))
    else:
        enhancer = IdentityEnhancer(cfg.dim, cfg.heads, anchor,
                                    root.stream("enhancer"))
        adapter = GatedContextAdapter(cfg.dim, cfg.heads, cfg.beta_adapter,
                                      root.stream("adapter"),
                                      double_attention=cfg.double_attention)
    denoiser.freeze_base()
    scene_train = sample_scene(cfg.text_tokens - 2, cfg.dim, root.stream("scene-train"))
    scene_eval = sample_scene(cfg.text_tokens - 2, cfg.dim, root.stream("scene-eval"))
    face_obs = world.encode_face(world.u_ref, root.stream("photo"), cfg.noise_scale)
    z0_ref = world.target_latent(world.u_ref, scene_train)
    return BaseBundle(cfg, table, anchor, world, encoder, schedule, denoiser,
                      enhancer, adapter, scene_train, scene_eval, face_obs,
                      z0_ref, base_loss)


def personalize_state(base, mode):
    """A fresh trainable state for one mode over a shared base.

    Every mode starts from bit-identical weights: copies of the base's
    jointly pretrained enhancer and adapter (gate reset to exactly
    zero), plus concept tokens and a face projection drawn from named
    streams.  The denoiser is cloned so key/value updates of different
    modes do not bleed into each other.
    """
    if mode not in MODES:
        raise ad.ContractError(f"unknown ablation mode {mode!r}")
    cfg = base.config
    root = ad.Rng(cfg.seed, "root")
    concept = ad.Parameter(
        init_concept_tokens(base.anchor, root.stream("concept"), cfg.v_init_noise),
        "concept-tokens")
    enhancer = base.enhancer.clone()
    adapter = base.adapter.clone()
    adapter.gate.value = np.array([[0.0]])
    face_linear = ad.Parameter(
        root.stream("face-linear").normal(cfg.dim, cfg.dim, 1.0 / math.sqrt(cfg.dim)),
        "face-linear")
    return TrainState(
        config=cfg, mode=mode, world=base.world, anchor=base.anchor,
        encoder=base.encoder, schedule=base.schedule, denoiser=base.denoiser.clone(),
        scene_train=base.scene_train, scene_eval=base.scene_eval,
        face_obs=ad.constant(base.face_obs, name="face-obs"), z0_ref=base.z0_ref,
        concept_tokens=concept, enhancer=enhancer, adapter=adapter,
        face_linear=face_linear)


def trainable_params(state):
    """The optimizer's view of one mode: which parameters may move."""
    kv = state.denoiser.adapted_params()
    if state.mode == "full":
        return [state.concept_tokens, *state.enhancer.params(),
                *state.adapter.params(), *kv]
    if state.mode == "naive_concat":
        return [state.concept_tokens, state.face_linear, *kv]
    if state.mode == "no_ide":
        return [state.concept_tokens, state.face_linear,
                *state.adapter.params(), *kv]
    if state.mode == "no_ida":
        return [state.concept_tokens, *state.enhancer.params(), *kv]
    raise ad.ContractError(f"unknown ablation mode {state.mode!r}")


def build_context(state, scene=None):
    """Conditioning rows for the current mode; scene defaults to training scene.

    full: enhanced face rows fused through the gated adapter.
    naive_concat: linearly projected face rows appended below the text rows.
    no_ide: raw projected face rows through the adapter (no enhancer).
    no_ida: the encoded text rows untouched.
    """
    scene_rows = state.scene_train if scene is None else scene
    slots = ad.concat_rows(state.concept_tokens, ad.constant(scene_rows))
    c_theta = state.encoder.encode(slots)
    if state.mode == "full":
        return state.adapter.adapt(c_theta, state.enhancer.enhance(state.face_obs))
    if state.mode == "naive_concat":
        return ad.concat_rows(c_theta, ad.matmul(state.face_obs, state.face_linear))
    if state.mode == "no_ide":
        return state.adapter.adapt(c_theta, ad.matmul(state.face_obs, state.face_linear))
    if state.mode == "no_ida":
        return c_theta
    raise ad.ContractError(f"unknown ablation mode {state.mode!r}")


def item_loss(state, context, z_t, t, eps):
    """Squared-error of the noise prediction for one corrupted latent."""
    predicted = state.denoiser.predict_noise(z_t, t, context)
    return ad.mse(predicted, ad.constant(eps))


def alignment_loss(state):
    """Mean-row alignment pulling enhanced rows toward the concept tokens."""
    enhanced = state.enhancer.enhance(state.face_obs)
    return ad.mse(ad.mean_rows(enhanced), ad.mean_rows(state.concept_tokens))


def stratified_steps(steps, count, rng):
    """One uniform draw per equal slice of [1, steps], low band first.

    Spreading the batch across the schedule cuts the loss variance that
    a fully random draw gets from its uneven timestep mix.
    """
    edges = np.linspace(1, steps + 1, count + 1)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        top = max(int(lo), min(int(hi) - 1, steps))
        out.append(int(rng.integers(int(lo), top, 1)[0]))
    return out


def batch_loss(state, rng, context=None):
    """Mean item loss over batch_size fresh (t, eps) corruption draws."""
    cfg = state.config
    if context is None:
        context = build_context(state)
    total = None
    for t in stratified_steps(state.schedule.steps, cfg.batch_size, rng):
        eps = rng.normal(1, cfg.latent_dim)
        z_t = state.schedule.noising(state.z0_ref, t, eps)
        item = item_loss(state, context, z_t, t, eps)
        total = item if total is None else ad.add(total, item)
    return ad.scale(total, 1.0 / cfg.batch_size)


def train_step(state, optimizer, params, rng):
    """One optimization step; returns the denoising loss value."""
    objective = batch_loss(state, rng)
    reported = objective.item()
    # The alignment objective needs an enhancer, so only the modes that
    # keep one carry it; it is the channel that teaches the concept
    # tokens the identity rather than leaving them at the anchor.
    if state.mode in ("full", "no_ida") and state.config.aux_weight > 0.0:
        objective = ad.add(objective, ad.scale(alignment_loss(state),
                                               state.config.aux_weight))
    ad.zero_grads(params)
    ad.backward(objective)
    optimizer.step()
    return reported


def train_run(cfg, base=None):
    """Full personalization run; deterministic given (config, seed)."""
    start = time.perf_counter()
    if base is None:
        base = build_base(cfg)
    state = personalize_state(base, cfg.ablation_mode)
    digest_before = state.denoiser.frozen_digest()
    params = trainable_params(state)
    optimizer = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    rng = ad.Rng(cfg.seed, "root").stream("personalize")
    curve = []
    for step in range(cfg.steps):
        # Cosine decay from the configured peak to zero; without it the
        # constant-rate optimizer keeps orbiting the minimum on noisy
        # batches instead of settling into it.
        optimizer.lr = cfg.learning_rate * 0.5 * (
            1.0 + math.cos(math.pi * step / cfg.steps))
        curve.append(train_step(state, optimizer, params, rng))
    state.trained = True
    report = TrainReport(
        mode=cfg.ablation_mode, seed=cfg.seed, loss_curve=curve,
        final_loss=curve[-1], initial_loss=curve[0],
        frozen_digest_before=digest_before,
        frozen_digest_after=state.denoiser.frozen_digest(),
        elapsed_s=time.perf_counter() - start, generator=ad.GENERATOR_NAME,
        config=cfg)
    return state, report
