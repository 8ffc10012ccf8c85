"""Shared oracles for the test suite."""

import numpy as np

from knotpair.cli import main
from knotpair.nn import Augmentation, init_model, simclr_objective, triplet_objective

TOY_DIMS = (9, 8, 4, 4)
TOY_HEAD = (4, 4, 3)
FD_STEP = 1e-5
GRAD_RTOL = 1e-4
# Central differences at h=1e-5 carry ~1e-10 of round-off, so magnitudes are
# floored here before taking the ratio; exact zeros would otherwise divide noise.
GRAD_FLOOR = 1e-5


def toy_model(variant, seed, dropout_layers=1):
    rng = np.random.default_rng(seed)
    iw = rng.uniform(0.2, 1.5, 9) if variant == "custom_weights" else None
    params = init_model(
        variant, rng, encoder_dims=TOY_DIMS, projection_dims=TOY_HEAD,
        dropout_layers=dropout_layers, input_weights=iw, dtype=np.float64,
    )
    if params.input_weights is not None and variant == "learnable_weights":
        params.input_weights[:] = rng.uniform(0.5, 1.5, 9)
    for layer in params.layers + (params.projection_head or []):
        layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
    return params


def toy_problem(variant, seed, mode):
    """(params, loss_and_grad) where loss_and_grad replays identical randomness per call."""
    params = toy_model(variant, seed)
    rng = np.random.default_rng(seed + 10_000)
    X = rng.uniform(0, 1, (12, 9))
    X[:, [0, 7, 8]] = rng.integers(1, 5, (12, 3))
    if variant == "simclr":
        aug = Augmentation(0.05, (0.9, 1.1), 0.1)
        rows = X[:4]

        def objective(need_grad=True):
            drop = np.random.default_rng(seed + 1) if mode == "train" else None
            return simclr_objective(params, rows, 0.5, aug, np.random.default_rng(seed + 2),
                                    drop, mode, need_grad)
    else:
        batch = np.stack([rng.choice(12, 3, replace=False) for _ in range(5)])

        def objective(need_grad=True):
            drop = np.random.default_rng(seed + 1) if mode == "train" else None
            return triplet_objective(params, X, batch, 1.0, drop, mode, need_grad)

    return params, objective


def finite_difference(params, objective, h=FD_STEP):
    """Central differences of the scalar objective for every trainable entry."""
    out = {}
    for name, arr in params.parameters().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = objective(False)[0]
            flat[i] = orig - h
            down = objective(False)[0]
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_errors(analytic, numeric):
    errs = {}
    for name in analytic:
        a, f = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), GRAD_FLOOR)
        errs[name] = float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
    return errs


def gradient_check(variant, seed, mode):
    params, objective = toy_problem(variant, seed, mode)
    _, analytic = objective(True)
    numeric = finite_difference(params, objective)
    return max(relative_errors(analytic, numeric).values())


PIPELINE_STAGES = ("synth", "extract", "triplets", "train", "embed", "cluster", "eval", "viz")


def run_pipeline(root, seed=3, epochs=3, n_specimens=10, variant="learnable"):
    """Drive every CLI stage in order; returns the per-stage output directories."""
    d = {k: root / k for k in PIPELINE_STAGES}
    feats = d["extract"] / "features.csv"
    split = d["triplets"] / "split.csv"
    steps = [
        ["synth", "--n-specimens", n_specimens, "--seed", seed, "--out", d["synth"]],
        ["extract", "--boards", d["synth"] / "boards.csv", "--measurements",
         d["synth"] / "measurements.csv", "--labels", d["synth"] / "labels", "--out", d["extract"]],
        ["triplets", "--features", feats, "--seed", seed, "--out", d["triplets"]],
        ["train", "--variant", variant, "--features", feats, "--triplets",
         d["triplets"] / "triplets.csv", "--split", split, "--epochs", epochs, "--seed", seed,
         "--out", d["train"]],
        ["embed", "--model", d["train"] / "model.json", "--features", feats, "--out", d["embed"]],
        ["cluster", "--embeddings", d["embed"] / "embeddings.csv", "--features", feats,
         "--split", split, "--out", d["cluster"]],
        ["eval", "--model", d["train"] / "model.json", "--features", feats, "--split", split,
         "--out", d["eval"]],
        ["viz", "--embeddings", d["embed"] / "embeddings.csv", "--pairs", d["cluster"] / "pairs.csv",
         "--out", d["viz"]],
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        if code != 0:
            raise AssertionError(f"{argv[0]} exited with {code}")
    return d


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
