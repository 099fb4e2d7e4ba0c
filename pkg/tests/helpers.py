"""Shared fixtures-as-functions for unit and acceptance tests."""

import numpy as np
import torch

from becdiff.ingest import SynthSpec, synth_population
from becdiff.schedule import coupled_real_pair
from becdiff.training import (
    TrainConfig,
    batch_tensors,
    build_models,
    discriminator_objective,
    generator_losses,
    generator_pass,
)


def tiny_records(n_rois=3, length=6, per_class=2, seed=0):
    return synth_population(SynthSpec(n_rois=n_rois, length=length, n_subjects_per_class=per_class,
                                      seed=seed))


def audit_config(**kw):
    base = dict(T=8, s=4, beta_min=0.05, beta_max=0.3, base_channels=2, heads=1, levels=1,
                blocks_per_level=[1], timestep_embed_dim=4, d_heads=1, d_embed_dim=4,
                cls_hidden=4, dtype="float64", single_scale_D=True)
    base.update(kw)
    return TrainConfig(**base)


def _central_difference(loss_fn, params, h):
    numeric = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        numeric.append(g)
    return numeric


def max_relative_error(analytic, numeric, floor):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = (a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
        worst = max(worst, float(err.max()))
    return worst


def gradient_audit(seed=0, h=1e-5, floor=1e-8, length=6, **overrides):
    """Analytic vs central-difference gradients of both training objectives.

    Six time points are too few for the four-scale discriminator, so the
    default audit uses its single-scale form; pass ``length=16`` and
    ``single_scale_D=False`` to audit the pyramid.

    Returns (generator max relative error, discriminator max relative error).
    """
    cfg = audit_config(seed=seed, **overrides)
    records = tiny_records(length=length, seed=seed)
    models = build_models(cfg, 3, length, sorted({r.label for r in records}))
    sched = cfg.schedule()
    f0, x, y = batch_tensors(records, models)
    gen = torch.Generator().manual_seed(seed)
    t = 8
    f_prev, f_t = coupled_real_pair(f0, t, sched, gen)
    eps = torch.randn(f0.shape, generator=gen, dtype=torch.float64)

    g_params = list(models.generator.parameters()) + list(models.classifier.parameters())

    def g_loss():
        f0_hat, a, fake = generator_pass(models, x, t, f_t, eps, sched)
        return generator_losses(models, f0_hat, a, fake, f0, y, t - sched.s)[0]

    for p in g_params + list(models.discriminator.parameters()):
        p.grad = None
    g_loss().backward()
    g_analytic = [p.grad.clone() for p in g_params]
    with torch.no_grad():
        g_numeric = _central_difference(g_loss, g_params, h)

    with torch.no_grad():
        fake = generator_pass(models, x, t, f_t, eps, sched)[2]
    d_params = list(models.discriminator.parameters())

    def d_loss():
        return discriminator_objective(models, f_prev, fake, t - sched.s)[0]

    for p in d_params:
        p.grad = None
    d_loss().backward()
    d_analytic = [p.grad.clone() for p in d_params]
    with torch.no_grad():
        d_numeric = _central_difference(d_loss, d_params, h)
    return (max_relative_error(g_analytic, g_numeric, floor),
            max_relative_error(d_analytic, d_numeric, floor))


def tiny_preset_run(seed, gamma, no_hierarchy=False, steps=200, sample_all=False):
    """Train the tiny preset on a synthetic population and sample BECs.

    Fold 0 of a stratified 5-fold split is held out. Returns plain Python
    data so the call can run in a worker process.
    """
    import time

    from becdiff.evaluation import edge_auroc, kfold_split
    from becdiff.training import Trainer, preset, sample_bec

    torch.set_num_threads(1)
    start = time.perf_counter()
    records = synth_population(SynthSpec(n_rois=10, length=200, n_subjects_per_class=20,
                                         class_count=2, seed=seed))
    folds = kfold_split([r.label for r in records], 5, seed)
    train = [r for r, f in zip(records, folds) if f != 0]
    test = [r for r, f in zip(records, folds) if f == 0]
    cfg = preset("tiny", gamma=gamma, seed=seed, no_hierarchy=no_hierarchy)
    trainer = Trainer(cfg, train, sorted({r.label for r in records}))
    trainer.fit(epochs=10 ** 6, max_steps=steps)
    sampled = {}
    for i, r in enumerate(records if sample_all else test):
        sampled[r.id] = sample_bec(r.rough, trainer.models, trainer.sched, seed=i).bec
    return {
        "rec": [m.loss_rec for m in trainer.history],
        "auroc": [edge_auroc(sampled[r.id], r.true_bec) for r in test],
        "abs_sum": [float(np.abs(sampled[r.id]).sum()) for r in test],
        "all_becs": [sampled[r.id] for r in records] if sample_all else None,
        "labels": [r.label for r in records],
        "seconds": time.perf_counter() - start,
    }
