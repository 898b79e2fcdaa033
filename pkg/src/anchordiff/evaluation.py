"""Diagnostics over trained states: similarity probes, mode grid, alignment.

Identity similarity asks whether sampled latents point at the reference
identity through the world's orthonormal latent probe; prompt similarity
asks whether they track the held-out scene through the token-space
probe.  Both are plain cosines, so every score lands in [-1, 1].

The ablation grid retrains each fusion mode over shared per-seed bases
and collects one metric row per (mode, seed).  The alignment diagnostic
measures how far trained concept rows sit from the face-derived rows
each branch feeds the denoiser: enhanced rows for the full model,
linearly projected rows for the naive baseline.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import trainer

MODE_ORDER = ("naive_concat", "no_ide", "no_ida", "full")


def cosine(a, b):
    """Cosine of two flat vectors; any zero-norm input scores 0.0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def identity_similarity(world, z0_hat):
    """Cosine between the reference identity and the probed latent."""
    probe = np.asarray(z0_hat, dtype=np.float64).reshape(1, -1) @ world.latent_probe
    return cosine(probe, world.u_ref)


def prompt_similarity(state, z0_hat, prompt_context):
    """Cosine between the token-space probe of z0_hat and the mean prompt row."""
    world = state.world
    probe = np.asarray(z0_hat, dtype=np.float64).reshape(1, -1) @ world.prompt_probe.T
    return cosine(probe, np.asarray(prompt_context).mean(axis=0))


def evaluate_state(state, n_samples=None):
    """Mean similarities over fresh ancestral samples on the held-out scene.

    Sampling noise comes from streams keyed only by (seed, sample index),
    so every mode at one seed is scored against identical noise draws.
    Zero-norm probe outputs score 0.0 and are counted in the result.
    """
    cfg = state.config
    if n_samples is None:
        n_samples = cfg.eval_samples
    context = trainer.build_context(state, scene=state.scene_eval)
    world = state.world
    ids, prompts, flagged = [], [], 0
    for i in range(n_samples):
        rng = ad.Rng(cfg.seed, "root").stream("evaluate").stream(f"sample-{i}")
        z0_hat = state.denoiser.sample(state.schedule, context, rng)
        if (np.linalg.norm(z0_hat @ world.latent_probe) == 0.0
                or np.linalg.norm(z0_hat @ world.prompt_probe.T) == 0.0):
            flagged += 1
        ids.append(identity_similarity(world, z0_hat))
        prompts.append(prompt_similarity(state, z0_hat, state.scene_eval))
    return {
        "identity_sim": float(np.mean(ids)),
        "prompt_sim": float(np.mean(prompts)),
        "samples": int(n_samples),
        "zero_norm_flagged": flagged,
    }


@dataclass
class MetricRow:
    """One grid cell: a mode's scores at one seed."""
    mode: str
    seed: int
    identity_sim: float
    prompt_sim: float
    final_loss: float
    time_s: float


def ablation_grid(cfg, seeds=None, n_samples=None):
    """Train and score every fusion mode; rows ordered by (mode, seed).

    Bases are built once per seed and shared across modes, so rows at a
    seed differ only in what personalization was allowed to touch.
    """
    if seeds is None:
        seeds = list(cfg.eval_seeds)
    cells = {}
    for seed in seeds:
        base = trainer.build_base(replace(cfg, seed=seed))
        for mode in MODE_ORDER:
            start = time.perf_counter()
            state, report = trainer.train_run(
                replace(cfg, seed=seed, ablation_mode=mode), base=base)
            scores = evaluate_state(state, n_samples)
            cells[(mode, seed)] = MetricRow(
                mode=mode, seed=seed,
                identity_sim=scores["identity_sim"],
                prompt_sim=scores["prompt_sim"],
                final_loss=report.final_loss,
                time_s=time.perf_counter() - start)
    rank = {mode: i for i, mode in enumerate(MODE_ORDER)}
    return [cells[key] for key in sorted(cells, key=lambda k: (rank[k[0]], k[1]))]


@dataclass
class AlignmentReport:
    """Concept-to-face distances for the two fusion branches at one seed."""
    seed: int
    dist_naive: float
    dist_enhanced: float


def nearest_row_distance(source_rows, target_rows):
    """Mean, over source rows, of the L2 distance to the nearest target row."""
    src = np.asarray(source_rows, dtype=np.float64)
    tgt = np.asarray(target_rows, dtype=np.float64)
    dists = []
    for row in src:
        dists.append(min(float(np.linalg.norm(row - t)) for t in tgt))
    return float(np.mean(dists))


def alignment_diagnostic(full_state, naive_state):
    """Distances from trained concept rows to each branch's face rows.

    Both branches use the same nearest-row mean-L2 measure over frozen
    post-training weights, so feeding identical rows to both yields
    identical distances.
    """
    if not (full_state.trained and naive_state.trained):
        raise ad.ContractError("alignment diagnostic needs trained states")
    if full_state.mode != "full" or naive_state.mode != "naive_concat":
        raise ad.ContractError(
            f"expected modes full and naive_concat, got {full_state.mode!r} "
            f"and {naive_state.mode!r}")
    if full_state.config.seed != naive_state.config.seed:
        raise ad.ContractError("alignment states must share a seed")
    enhanced = full_state.enhancer.enhance(full_state.face_obs).value
    projected = naive_state.face_obs.value @ naive_state.face_linear.value
    return AlignmentReport(
        seed=int(full_state.config.seed),
        dist_naive=nearest_row_distance(naive_state.concept_tokens.value, projected),
        dist_enhanced=nearest_row_distance(full_state.concept_tokens.value, enhanced))


def alignment_suite(cfg, seeds=None):
    """One AlignmentReport per seed, full model against the naive baseline."""
    if seeds is None:
        seeds = list(cfg.eval_seeds)
    reports = []
    for seed in seeds:
        base = trainer.build_base(replace(cfg, seed=seed))
        full_state, _ = trainer.train_run(
            replace(cfg, seed=seed, ablation_mode="full"), base=base)
        naive_state, _ = trainer.train_run(
            replace(cfg, seed=seed, ablation_mode="naive_concat"), base=base)
        reports.append(alignment_diagnostic(full_state, naive_state))
    return reports
