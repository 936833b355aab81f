"""Registered gradient-check suites for every learned module.

`check_param` finite-difference-checks a forward closure against one named
parameter by swapping the entry in the module's parameter dict. The suite
registry at the bottom groups the standard checks used by the CLI
``gradcheck`` command and the acceptance tests; each suite runs in the
64-bit profile and reports the worst relative error across its checks.

Large tensors are checked on a seeded coordinate subsample; the analytic
gradient is always complete, only the number of probed finite-difference
coordinates is reduced to keep a full sweep under the time budget.
"""

from __future__ import annotations

import numpy as np

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor

# finite-difference coordinates probed per tensor before subsampling kicks in
SAMPLE_CAP = 48


def check_param(forward, params: dict[str, DTensor], name: str,
                step: float = 1e-5, sample: int | None = None, seed: int = 0) -> float:
    """Max relative gradient error of ``forward()`` w.r.t. ``params[name]``."""
    orig = params[name]

    def f(t):
        params[name] = t
        try:
            return forward()
        finally:
            params[name] = orig

    return dm.grad_check(f, orig, step=step, sample=sample, seed=seed)


def check_all_params(forward, params: dict[str, DTensor], step: float = 1e-5,
                     cap: int | None = SAMPLE_CAP, seed: int = 0) -> dict[str, float]:
    """Run check_param over every entry; subsample tensors larger than cap."""
    out = {}
    for name in sorted(params):
        n = params[name].size
        sample = None if cap is None or n <= cap else cap
        out[name] = check_param(forward, params, name, step=step, sample=sample, seed=seed)
    return out


def _require_test_profile():
    if dm.get_profile() != "test":
        raise RuntimeError("gradient suites must run in the 64-bit 'test' profile")


def suite_engine(rng: np.random.Generator) -> dict[str, float]:
    """Composite graph over the raw engine: every primitive in one function."""
    _require_test_profile()
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 5))
    grid = rng.standard_normal((5, 7, 3))
    uu = rng.uniform(0.4, 5.4, size=4)
    vv = rng.uniform(0.4, 3.4, size=4)

    def f(t):
        h = dm.tanh(dm.matmul(t, DTensor(w)))
        h = dm.add(dm.softplus(h), dm.sigmoid(h))
        h = dm.mul(dm.exp(dm.mul(h, 0.1)), dm.cos(h))
        s = dm.softmax(h, axis=1)
        samp = dm.bilinear_hw(DTensor(grid), DTensor(vv), DTensor(uu))
        joined = dm.concat([s, samp], axis=1)
        part = dm.slice_axis(joined, 1, 1, 6)
        return dm.mean(dm.mul(part, part))

    return {"composite": dm.grad_check(f, DTensor(x))}


def suite_conditioning(rng: np.random.Generator) -> dict[str, float]:
    from dynfield import conditioning as cond

    _require_test_profile()
    out: dict[str, float] = {}

    tfilt = cond.TemporalFilter(dim=8, window=5, hidden=16, rng=rng)
    track = cond.ConditionTrack(rng.standard_normal((12, 8)))
    fwd = lambda: tfilt(track, 6)
    for k, v in check_all_params(fwd, tfilt.p).items():
        out[f"tfilt.{k}"] = v

    enc = cond.FeatureExtractor(mid=6, out=10, rng=rng)
    img = rng.uniform(0, 1, size=(5, 5, 3))
    fwd = lambda: enc(img).data
    for k, v in check_all_params(fwd, enc.p).items():
        out[f"enc.{k}"] = v

    agg = cond.Aggregator(dim=10, hidden=12, rng=rng)
    feats = DTensor(rng.standard_normal((3, 10)))
    fwd = lambda: agg(feats)
    for k, v in check_all_params(fwd, agg.p).items():
        out[f"agg.{k}"] = v
    return out


def suite_field(rng: np.random.Generator) -> dict[str, float]:
    from dynfield import radiance

    _require_test_profile()
    cfg = radiance.FieldConfig(trunk_depth=3, trunk_width=24, skip_at=2,
                               condition_dim=6, feature_dim=10)
    field = radiance.RadianceField(cfg, rng=rng)
    p = DTensor(rng.uniform(-0.5, 0.5, size=(5, 3)))
    d_raw = rng.standard_normal((5, 3))
    d = DTensor(d_raw / np.linalg.norm(d_raw, axis=1, keepdims=True))
    a = DTensor(rng.standard_normal(6))
    feat = DTensor(rng.standard_normal((5, 10)))

    def fwd():
        color, sigma = field(p, d, a, feat)
        return dm.add(dm.sum_(color), dm.sum_(sigma))

    return check_all_params(fwd, field.p)


def suite_warp(rng: np.random.Generator) -> dict[str, float]:
    from dynfield import warpfield

    _require_test_profile()
    cfg = warpfield.WarpConfig(hidden=20, condition_dim=6, feature_dim=10)
    warp = warpfield.WarpModule(cfg, rng=rng)
    # zero-initialized output layer has zero gradient flow through a plain
    # forward product, so nudge it off zero before checking
    warp.p["l2.w"].assign_(0.01 * rng.standard_normal(warp.p["l2.w"].shape))
    p = DTensor(rng.uniform(-0.5, 0.5, size=(5, 3)))
    a = DTensor(rng.standard_normal(6))
    feat = DTensor(rng.standard_normal((5, 10)))

    def fwd():
        return warp(p, a, feat)

    return check_all_params(fwd, warp.p)


def suite_renderer(rng: np.random.Generator) -> dict[str, float]:
    """End-to-end pixel loss through compositing, field, warp, and sampling."""
    from dynfield import model as model_mod

    _require_test_profile()
    return model_mod.renderer_grad_suite(rng)


SUITES = {
    "engine": suite_engine,
    "conditioning": suite_conditioning,
    "field": suite_field,
    "warp": suite_warp,
    "renderer": suite_renderer,
}


def run_suites(names=None, seed: int = 0) -> dict[str, dict[str, float]]:
    """Run the named suites (all by default); returns suite -> check -> error."""
    _require_test_profile()
    results = {}
    for name in names or sorted(SUITES):
        if name not in SUITES:
            raise KeyError(f"unknown gradient suite {name!r}; have {sorted(SUITES)}")
        rng = np.random.default_rng(seed)
        results[name] = SUITES[name](rng)
    return results
