import json
from pathlib import Path

import numpy as np
import pytest

from mergelab.adaptation import finetune_expert, pretrain_backbone
from mergelab.engine import LayerParams, ParamSet, init_params
from mergelab.suites import SuiteConfig, gen_suite, spawn_rng

REPO_ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CONFIG = REPO_ROOT / "configs" / "reference.json"


def load_reference():
    with open(REFERENCE_CONFIG, encoding="utf-8") as f:
        return json.load(f)


def build_reference_models(seed: int, suite=None):
    """Suite + pre-trained backbone + per-task experts for one seed of the
    reference configuration."""
    ref = load_reference()
    suite_cfg = dict(ref["suite"], seed=seed)
    cfg = SuiteConfig(**suite_cfg)
    if suite is None:
        suite = gen_suite(cfg)
    ft = ref["finetune"]
    dims = (cfg.input_dim, *ft["hidden"])
    head_dims = {t.task_id: t.num_outputs for t in suite.tasks}
    init = init_params(dims, head_dims, spawn_rng(seed, "init"))
    pre = pretrain_backbone(init, suite, epochs=ft["pre_epochs"], lr=ft["pre_lr"],
                            batch_size=ft["batch_size"], seed=seed)
    experts = {
        t.task_id: finetune_expert(pre, t.x_train, t.y_train, t.task_id,
                                   epochs=ft["epochs"], lr=ft["lr"],
                                   batch_size=ft["batch_size"], seed=seed, kind=t.kind)
        for t in suite.tasks
    }
    return cfg, suite, pre, experts


def random_paramset(rng, dims=(5, 6, 4), tasks=("a", "b"), classes=3) -> ParamSet:
    enc = tuple(
        LayerParams(rng.normal(0.0, 1.0, (o, i)), rng.normal(0.0, 1.0, o))
        for i, o in zip(dims, dims[1:])
    )
    heads = {
        t: LayerParams(rng.normal(0.0, 1.0, (classes, dims[-1])), rng.normal(0.0, 1.0, classes))
        for t in tasks
    }
    return ParamSet(enc, heads)


def fd_rel_error(fd: float, analytic: float, zero_tol: float = 1e-7) -> float:
    """Relative disagreement between a central-difference estimate and an
    analytic gradient. Values that agree to within zero_tol absolutely count
    as matching: below that scale the difference quotient is pure rounding
    noise from loss cancellation."""
    scale = max(abs(fd), abs(analytic))
    if scale < zero_tol:
        return 0.0
    return abs(fd - analytic) / scale


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    if len(a.encoder) != len(b.encoder) or set(a.heads) != set(b.heads):
        return False
    for la, lb in zip(a.encoder, b.encoder):
        if not (np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)):
            return False
    for t in a.heads:
        if not (np.array_equal(a.heads[t].weight, b.heads[t].weight)
                and np.array_equal(a.heads[t].bias, b.heads[t].bias)):
            return False
    return True


@pytest.fixture(scope="session")
def reference_run():
    """Seed-0 reference suite with trained backbone and experts."""
    return build_reference_models(0)
