"""Finite-difference audit of the full training gradient.

Builds a deliberately small model, assembles the complete
personalization loss (concept tokens through enhancer, adapter and
denoiser), and compares every analytic gradient entry against a central
finite difference.  Gradients are checked at a generic point: the run
nudges the fusion gate and the output head off their exact-zero
starting values, which would otherwise silence upstream paths and let
a wrong backward rule hide behind a zero.
"""

from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import trainer
from .config import ExperimentConfig

TOLERANCE = 1e-5
STEP = 1e-6
ERROR_FLOOR = 1e-4


def downscaled_config(seed=1):
    """A model small enough to finite-difference in seconds."""
    return ExperimentConfig(
        dim=8, heads=2, hidden_dim=8, hidden_tokens=2, latent_dim=8,
        time_steps=10, table_size=8, identity_dim=4, face_rows=2,
        text_tokens=4, steps=1, batch_size=2, pretrain_steps=0, seed=seed)


def relative_error(numeric, analytic, floor=ERROR_FLOOR):
    """Elementwise error scaled by the larger magnitude, floored.

    Below the floor the comparison turns absolute: a central difference
    with a micro step cannot resolve gradients much smaller than the
    roundoff of the loss itself, so demanding relative agreement there
    would only measure noise.
    """
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return np.abs(numeric - analytic) / scale


def check_parameter(loss_fn, param, delta=STEP):
    """Central differences for one parameter against its backward pass.

    loss_fn must rebuild the loss graph from scratch on every call and
    must be deterministic.  Returns (max relative error, numeric
    gradient, analytic gradient).
    """
    ad.zero_grads([param])
    ad.backward(loss_fn())
    analytic = param.grad.copy()
    numeric = np.zeros_like(param.value)
    for index in np.ndindex(param.value.shape):
        saved = param.value[index]
        param.value[index] = saved + delta
        up = loss_fn().item()
        param.value[index] = saved - delta
        down = loss_fn().item()
        param.value[index] = saved
        numeric[index] = (up - down) / (2.0 * delta)
    err = relative_error(numeric, analytic)
    return float(err.max()), numeric, analytic


def _generic_point(state):
    """Open the gate and wake the head so every gradient path is live."""
    state.adapter.gate.value = np.array([[0.3]])
    head = state.denoiser.out_head
    head.value = ad.Rng(state.config.seed, "gradcheck-head").normal(
        *head.value.shape, std=0.1)


def parameter_groups(state):
    """Trainable parameters of the full mode, bucketed for reporting."""
    return {
        "concept_tokens": [state.concept_tokens],
        "enhancer": state.enhancer.params(),
        "adapter": state.adapter.params(),
        "denoiser_kv": state.denoiser.adapted_params(),
    }


def check_gradients(cfg=None, delta=STEP):
    """Max relative error per parameter group, analytic vs numeric."""
    if cfg is None:
        cfg = downscaled_config()
    cfg = replace(cfg, ablation_mode="full")
    base = trainer.build_base(cfg)
    state = trainer.personalize_state(base, "full")
    _generic_point(state)
    groups = parameter_groups(state)

    def loss_graph():
        return trainer.batch_loss(state, ad.Rng(cfg.seed, "gradcheck-batch"))

    report = {"tolerance": TOLERANCE, "delta": delta, "groups": {}, "failing": []}
    worst = 0.0
    for name, members in groups.items():
        group_worst = 0.0
        entries = 0
        for p in members:
            max_err, _, _ = check_parameter(loss_graph, p, delta)
            group_worst = max(group_worst, max_err)
            entries += int(p.value.size)
        report["groups"][name] = {"max_rel_err": group_worst, "entries": entries}
        if group_worst > TOLERANCE:
            report["failing"].append(name)
        worst = max(worst, group_worst)
    report["max_rel_err"] = worst
    report["passed"] = worst <= TOLERANCE
    return report
