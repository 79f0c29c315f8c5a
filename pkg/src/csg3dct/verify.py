"""Invariant and oracle checks behind ``csg3dct verify`` and the acceptance tests.

Every check returns a :class:`CheckResult`; ``run_checks`` prints them as a
pass/fail table. The training checks are slow and only run with ``full=True``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .amdf import (SPATIAL, TEMPORAL, AmdfBlock, FusionAttention, IntraBranch, capture_attention, ca_fusion,
                   full_cross_attention)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig
from .data import generate_synthetic_dataset
from .encoder import valid_temporal_range
from .gradcheck import check_gradients, finite_diff_gradient, relative_error
from .metrics import evaluate_metrics
from .model import CSG3DCT
from .oracles import brute_force_metrics
from .tensor import Tensor, count_ops, default_dtype, no_grad
from .train import evaluate, held_out_metrics, inflate_into, pretrain_2d, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} {self.seconds:8.1f}s  {self.detail}"


def _timed(name: str, fn: Callable[[], tuple]) -> CheckResult:
    start = time.perf_counter()
    passed, detail, values = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start, values)


# ---------------------------------------------------------------- gradients

def _distinct(rng, shape):
    """Well-separated values: no near-ties for max pooling, nothing near the relu kink."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n / 2 + 0.5) * 0.37 / max(n / 8, 1)
    return v.reshape(shape)


def _bn(training):
    def f(x, g, b):
        return ops.batch_norm(x, g, b, np.zeros(3), np.full(3, 1.3), training=training)
    return f


PRIMITIVE_CASES = {
    "add": (lambda a, b: ops.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ops.sub(a, b), [(2, 3), (2, 1)]),
    "mul": (lambda a, b: ops.mul(a, b), [(2, 3, 4), (3, 1)]),
    "div": (lambda a, b: ops.div(a, ops.add(ops.square(b), 1.0)), [(3, 4), (3, 4)]),
    "neg": (lambda a: ops.neg(a), [(5,)]),
    "exp": (lambda a: ops.exp(a), [(2, 3)]),
    "relu": (lambda a: ops.relu(a), [(4, 5)]),
    "gelu": (lambda a: ops.gelu(a), [(4, 5)]),
    "sum_axis": (lambda a: ops.sum(a, axis=1), [(3, 4, 2)]),
    "mean_axes": (lambda a: ops.mean(a, axis=(0, 2), keepdims=True), [(3, 4, 2)]),
    "reshape": (lambda a: ops.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "getitem": (lambda a: ops.getitem(a, (slice(None), slice(1, 3))), [(3, 4)]),
    "broadcast_to": (lambda a: ops.broadcast_to(a, (2, 3, 4)), [(3, 1)]),
    "pad": (lambda a: ops.pad_constant(a, ((1, 0), (0, 2))), [(2, 3)]),
    "matmul": (lambda a, b: ops.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "linear": (lambda x, w, b: ops.linear(x, w, b), [(2, 3, 4), (5, 4), (5,)]),
    "softmax": (lambda a: ops.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: ops.log_softmax(a, axis=0), [(4, 3)]),
    "cross_entropy": (lambda a: ops.cross_entropy(a, [0, 2, 1, 2]), [(4, 3)]),
    "layer_norm": (lambda x, g, b: ops.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "batch_norm_train": (_bn(True), [(2, 3, 2, 2, 2), (3,), (3,)]),
    "batch_norm_eval": (_bn(False), [(2, 3, 2, 2, 2), (3,), (3,)]),
    "conv3d": (lambda x, w, b: ops.conv3d(x, w, b, stride=(1, 2, 2), padding=(1, 1, 1)),
               [(1, 2, 3, 5, 5), (2, 2, 3, 3, 3), (2,)]),
    "conv3d_pointwise": (lambda x, w: ops.conv3d(x, w), [(2, 3, 2, 2, 2), (2, 3, 1, 1, 1)]),
    "max_pool3d": (lambda x: ops.max_pool3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1)), [(1, 2, 2, 5, 5)]),
    "avg_pool3d": (lambda x: ops.avg_pool3d(x, (1, 2, 2)), [(1, 2, 2, 4, 4)]),
    "upsample": (lambda x: ops.upsample_nearest3d(x, (1, 2, 2)), [(1, 2, 2, 2, 2)]),
}


def primitive_gradient_error(name: str, seed: int) -> float:
    """Max relative error of backward vs central differences for one primitive on one random input."""
    fn, shapes = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        inputs = [Tensor(_distinct(rng, s), requires_grad=True) for s in shapes]
        weight = Tensor(rng.normal(size=fn(*inputs).shape))

        def loss():
            return ops.sum(ops.mul(fn(*inputs), weight))

        loss().backward()
        return max(relative_error(x.grad, finite_diff_gradient(lambda _: loss(), x, step=1e-5)) for x in inputs)


def tiny_config(**changes) -> ModelConfig:
    """d=8, n=2, t=2, at most 8 channels: small enough for per-parameter finite differences."""
    cfg = ModelConfig(frames=2, max_frames=2, image_size=16, channels=(4, 4, 8, 8, 8), bottleneck_ratio=2,
                      stem_kernel=3, embed_dim=8, heads=2, patch_size=2, mlp_ratio=2)
    return cfg.replace(**changes)


def model_gradient_errors(seed: int = 0, coords: int = 4, fusion: str = "ca") -> dict:
    """Per-parameter max relative error on ``coords`` sampled coordinates of the tiny model at 64-bit."""
    with default_dtype(np.float64):
        model = CSG3DCT(tiny_config(fusion=fusion), seed=seed)
        model.train()
        rng = np.random.default_rng(seed + 100)
        clip = Tensor(rng.uniform(0, 1, size=(2, 1, 2, 16, 16)))
        labels = np.array([0, 1])
        # train-mode batch norm updates running stats; they do not feed the loss, so repeated calls are pure
        named = list(model.named_parameters())
        errors = check_gradients(lambda: model.loss(clip, labels)[0], [p for _, p in named], step=1e-5,
                                 max_coords=coords, rng=np.random.default_rng(seed))
    return {name: errors[i] for i, (name, _) in enumerate(named)}


def check_gradient_correctness(seeds: int = 5, coords: int = 4) -> CheckResult:
    def run():
        worst_prim = max(primitive_gradient_error(n, s) for n in PRIMITIVE_CASES for s in range(seeds))
        model_err = model_gradient_errors(coords=coords)
        worst_model = max(model_err.values())
        worst_name = max(model_err, key=model_err.get)
        ok = worst_prim < 1e-4 and worst_model < 1e-3
        return ok, (f"primitives {len(PRIMITIVE_CASES)}x{seeds} max rel {worst_prim:.1e} (<1e-4); "
                    f"tiny model {len(model_err)} tensors max rel {worst_model:.1e} (<1e-3, {worst_name})"), \
            {"primitive": worst_prim, "model": worst_model}
    return _timed("gradient correctness", run)


# ---------------------------------------------------------------- inflation

def _calibrate_norms(model, frames: np.ndarray, rng, passes: int = 3) -> None:
    """Random batch-norm affine parameters, running statistics estimated on ``frames``.

    Mirrors a trained source network: normalised activations stay O(1).
    """
    norms = [mod for _, mod in model.named_modules() if type(mod).__name__ == "BatchNorm3d"]
    for mod in norms:
        c = mod.weight.shape[0]
        mod.weight.data[...] = rng.uniform(0.5, 1.5, c)
        mod.bias.data[...] = rng.normal(0.0, 0.1, c)
        mod.momentum = 1.0
    model.train()
    with no_grad():
        for _ in range(passes):
            model(Tensor(frames))
    for mod in norms:
        mod.momentum = 0.1
    model.eval()


def boring_video_difference(seed: int = 0, frames: int = 8, cfg: Optional[ModelConfig] = None) -> dict:
    """Per-stage max |3D - 2D| on a constant clip, over temporally valid frames (32-bit, eval mode)."""
    cfg = (cfg or ModelConfig()).replace(frames=frames)
    rng = np.random.default_rng(seed)
    model2d = CSG3DCT(cfg.as_2d(), seed=seed + 1)
    frame = rng.uniform(0, 1, size=(4, cfg.in_channels, 1, cfg.image_size, cfg.image_size)).astype(np.float32)
    _calibrate_norms(model2d, frame, rng)
    model3d = CSG3DCT(cfg, seed=seed + 2)
    inflate_into(model3d, model2d, seed=seed)
    model3d.eval()
    clip = np.repeat(frame, frames, axis=2)
    with no_grad():
        ref = model2d.encoder(Tensor(frame))
        out = model3d.encoder(Tensor(clip))
    diffs = {}
    for stage, (r, o, (lo, hi)) in enumerate(zip(ref, out, valid_temporal_range(cfg, frames)), 1):
        if hi <= lo:
            continue
        diffs[f"c{stage}"] = float(np.abs(o.data[:, :, lo:hi] - r.data).max())
    return diffs


def check_boring_video(seed: int = 0) -> CheckResult:
    def run():
        diffs = boring_video_difference(seed)
        worst = max(diffs.values())
        return worst < 1e-5, f"max abs diff {worst:.1e} over stages {','.join(diffs)} (<1e-5)", diffs
    return _timed("boring-video inflation", run)


# ---------------------------------------------------------------- CA fusion

def ca_equivalence(instances: int = 100, seed: int = 0, frames: int = 8, grid: int = 4, dim: int = 32,
                   heads: int = 4) -> tuple:
    """(max |CA CLS - full cross-attention CLS row|, max patch change, QK^T+AV ratio)."""
    rng = np.random.default_rng(seed)
    L = frames * grid * grid + 1
    worst = worst_patch = 0.0
    with default_dtype(np.float64):
        for i in range(instances):
            fuse = FusionAttention(dim, heads, rng=rng)
            for mod in (fuse.norm, fuse.norm_kv):
                mod.weight.data[...] = rng.uniform(0.5, 1.5, dim)
                mod.bias.data[...] = rng.normal(0, 0.1, dim)
            z_t, z_c = Tensor(rng.normal(size=(2, L, dim))), Tensor(rng.normal(size=(2, L, dim)))
            with no_grad():
                ca = ca_fusion(z_t, z_c, fuse).data
                full = full_cross_attention(z_t, z_c, fuse).data
            worst = max(worst, float(np.abs(ca[:, 0] - full[:, 0]).max()))
            worst_patch = max(worst_patch, float(np.abs(ca[:, 1:] - z_t.data[:, 1:]).max()))
        with count_ops() as c_ca, no_grad():
            ca_fusion(z_t, z_c, fuse)
        with count_ops() as c_full, no_grad():
            full_cross_attention(z_t, z_c, fuse)
    ca_cost = c_ca.by_op["ca_qk"] + c_ca.by_op["ca_av"]
    full_cost = c_full.by_op["full_ca_qk"] + c_full.by_op["full_ca_av"]
    return worst, worst_patch, ca_cost / full_cost, L


def check_ca_fusion(instances: int = 100) -> CheckResult:
    def run():
        worst, patch, ratio, L = ca_equivalence(instances)
        ok = worst < 1e-6 and patch == 0.0 and ratio <= 0.01
        return ok, (f"{instances} instances max diff {worst:.1e} (<1e-6); patches unchanged={patch == 0.0}; "
                    f"QK^T+AV ratio at N={L}: {ratio:.5f} (<=0.01)"), {"diff": worst, "ratio": ratio}
    return _timed("CA fusion equivalence", run)


# ---------------------------------------------------------------- factorization

def factorization_gradients(axis: str, coords: int = 20, seed: int = 0, t: int = 4, n: int = 3,
                            dim: int = 8, heads: int = 2) -> tuple:
    """Gradients of single output coordinates w.r.t. patch tokens outside the attention group.

    Returns (max |cross-group gradient|, min over probes of max |same-group gradient|).
    """
    rng = np.random.default_rng(seed)
    s = n * n
    with default_dtype(np.float64):
        branch = IntraBranch(dim, heads, 2, axis, rng=rng)
        z = Tensor(rng.normal(size=(1, t * s + 1, dim)), requires_grad=True)
        cross, same = 0.0, np.inf
        for _ in range(coords):
            f, p, c = rng.integers(t), rng.integers(s), rng.integers(dim)
            mask = np.zeros(z.shape)
            mask[0, 1 + f * s + p, c] = 1.0
            z.grad = None
            ops.sum(ops.mul(branch(z, t, n), Tensor(mask))).backward()
            g = np.abs(z.grad[0, 1:]).max(axis=-1).reshape(t, s)
            if axis == SPATIAL:
                other = np.delete(g, f, axis=0)
                own = g[f]
            else:
                other = np.delete(g, p, axis=1)
                own = g[:, p]
            cross = max(cross, float(other.max()))
            same = min(same, float(own.max()))
    return cross, same


def check_factorization(coords: int = 20) -> CheckResult:
    def run():
        s_cross, s_same = factorization_gradients(SPATIAL, coords)
        t_cross, t_same = factorization_gradients(TEMPORAL, coords)
        ok = s_cross == 0.0 and t_cross == 0.0 and s_same > 0 and t_same > 0
        return ok, (f"{coords} coords each: cross-frame grad {s_cross:g}, cross-position grad {t_cross:g} "
                    f"(exactly 0); in-group grads nonzero={s_same > 0 and t_same > 0}"), \
            {"spatial": s_cross, "temporal": t_cross}
    return _timed("factorization masks", run)


# ---------------------------------------------------------------- structural invariants

def attention_invariants(seed: int = 0) -> dict:
    out = {}
    rng = np.random.default_rng(seed)
    for fusion in ("swa", "ca", "none"):
        cfg = ModelConfig(fusion=fusion)
        model = CSG3DCT(cfg, seed=seed)
        clip = Tensor(rng.uniform(0, 1, size=(2, 1, cfg.frames, cfg.image_size, cfg.image_size)).astype(np.float32))
        with capture_attention() as rec, no_grad():
            feats, z = model.features(clip)
        row_err = max(float(np.abs(m.sum(axis=-1) - 1.0).max()) for m in rec["maps"])
        mix_ok = all(np.all(w > 0) and abs(float(w.sum()) - 1.0) < 1e-6 for w in rec["mix"])
        out[fusion] = {
            "row_sum_error": row_err,
            "maps": len(rec["maps"]),
            "mix_ok": bool(mix_ok),
            "temporal_lengths": [f.shape[2] for f in feats],
            "frames": cfg.frames,
            "amdf_blocks": len(model.amdf),
            "conv_blocks": model.num_conv_blocks,
            "tokens": z.shape[1],
        }
    return out


def check_attention_invariants(seed: int = 0) -> CheckResult:
    def run():
        inv = attention_invariants(seed)
        row = max(v["row_sum_error"] for v in inv.values())
        mix = all(v["mix_ok"] for v in inv.values())
        length = all(all(n == v["frames"] for n in v["temporal_lengths"]) for v in inv.values())
        blocks = all(v["amdf_blocks"] == v["conv_blocks"] + 1 for v in inv.values())
        ok = row < 1e-6 and mix and length and blocks
        return ok, (f"row-sum err {row:.1e} (<1e-6); mixing ok={mix}; T kept at c1-c5={length}; "
                    f"AMDF=conv+1 ({inv['ca']['amdf_blocks']}={inv['ca']['conv_blocks']}+1)={blocks}"), inv
    return _timed("attention/norm invariants", run)


# ---------------------------------------------------------------- checkpoints

def checkpoint_roundtrip(seed: int = 0) -> dict:
    model = CSG3DCT(ModelConfig(frames=8), seed=seed)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(size=p.shape)
    blob = save_checkpoint(model).to_bytes()
    restored = CSG3DCT(ModelConfig(frames=8), seed=seed + 1)
    load_checkpoint(Checkpoint.from_bytes(blob), restored)
    a, b = model.state_dict(), restored.state_dict()
    bitwise = all(a[k].tobytes() == b[k].tobytes() for k in a)
    model16 = CSG3DCT(ModelConfig(frames=16), seed=seed + 2)
    load_checkpoint(Checkpoint.from_bytes(blob), model16)
    c = model16.state_dict()
    unchanged = list(a) == list(c) and all(a[k].tobytes() == c[k].tobytes() for k in a)
    return {"bitwise": bitwise, "loads_16": unchanged, "tensors": len(a)}


def check_checkpoint(seed: int = 0) -> CheckResult:
    def run():
        r = checkpoint_roundtrip(seed)
        return r["bitwise"] and r["loads_16"], (f"{r['tensors']} tensors bitwise round-trip={r['bitwise']}; "
                                                 f"8-frame -> 16-frame unchanged={r['loads_16']}"), r
    return _timed("checkpoint round-trip", run)


# ---------------------------------------------------------------- metrics

def metrics_oracle_mismatches(pairs: int = 1000, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(pairs):
        n = int(rng.integers(1, 40))
        p, y = rng.integers(0, 2, n), rng.integers(0, 2, n)
        got = evaluate_metrics(p, y).as_dict()
        want = brute_force_metrics(p.tolist(), y.tolist())
        bad += any(got[k] != want[k] for k in want)
    return bad


def check_metrics_oracle(pairs: int = 1000) -> CheckResult:
    def run():
        bad = metrics_oracle_mismatches(pairs)
        return bad == 0, f"{pairs} random prediction/label sets, {bad} mismatches vs brute force", {"bad": bad}
    return _timed("metrics oracle", run)


# ---------------------------------------------------------------- training (slow)

def end_to_end(count: int = 1000, epochs: int = 20, seed: int = 0, lr: float = 1e-3, batch_size: int = 8,
               data_seed: int = 0) -> dict:
    data = generate_synthetic_dataset(count, T=8, H=64, W=64, seed=data_seed)
    run = RunConfig(model=ModelConfig(fusion="ca"), lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)
    result = train(run, data)
    metrics = held_out_metrics(result, data)
    return {"test_accuracy": metrics.accuracy, "test_f1": metrics.f1, "best_epoch": result.best_epoch,
            "log": result.log, "test_clips": len(result.splits[2])}


def check_end_to_end(count: int = 1000, epochs: int = 20) -> CheckResult:
    def run():
        r = end_to_end(count, epochs)
        bad = metrics_oracle_mismatches(200)
        ok = r["test_accuracy"] >= 0.90 and bad == 0
        return ok, (f"{count} clips, {epochs} epochs: test acc {r['test_accuracy']:.3f} on {r['test_clips']} "
                    f"clips (>=0.90), F1 {r['test_f1']:.3f}, best epoch {r['best_epoch']}; "
                    f"metric oracle mismatches {bad}"), r
    return _timed("end-to-end synthetic task", run)


def ablation_init(seeds=(0, 1, 2), count: int = 240, epochs: int = 5, lr: float = 3e-4,
                  batch_size: int = 8) -> dict:
    """Validation accuracy at the last epoch for scratch vs inflated init, per seed."""
    out = {"scratch": [], "inflated": []}
    for seed in seeds:
        data = generate_synthetic_dataset(count, seed=1000 + seed)
        for init in ("scratch", "inflated"):
            run = RunConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed, init=init,
                            val_fraction=0.25, train_fraction=0.5)
            result = train(run, data)
            out[init].append(result.log[-1]["val_accuracy"])
    return out


def check_ablation_init(seeds=(0, 1, 2), **kw) -> CheckResult:
    def run():
        r = ablation_init(seeds, **kw)
        s, i = float(np.mean(r["scratch"])), float(np.mean(r["inflated"]))
        return i >= s, (f"val acc at epoch {kw.get('epochs', 5)} over {len(seeds)} seeds: inflated {i:.3f} "
                        f"vs scratch {s:.3f} (inflated >= scratch)"), r
    return _timed("ablation: inflated vs scratch", run)


def ablation_fusion(seeds=(0, 1, 2), count: int = 240, epochs: int = 6, lr: float = 3e-4,
                    batch_size: int = 8, eval_count: int = 400) -> dict:
    """Accuracy of the final model per fusion mode and seed.

    ``ca``/``swa``/``none`` hold accuracy on ``eval_count`` fresh clips; the
    ``split_*`` lists hold accuracy on the training data's own test split,
    which is only ~50 clips and too coarse for a 2-point comparison.
    """
    modes = ("ca", "swa", "none")
    out = {**{m: [] for m in modes}, **{f"split_{m}": [] for m in modes}}
    for seed in seeds:
        data = generate_synthetic_dataset(count, seed=2000 + seed)
        fresh = generate_synthetic_dataset(eval_count, seed=9000 + seed)
        for fusion in modes:
            run = RunConfig(model=ModelConfig(fusion=fusion), lr=lr, epochs=epochs, batch_size=batch_size,
                            seed=seed)
            result = train(run, data)
            test = [data[i] for i in result.splits[2]]
            out[f"split_{fusion}"].append(evaluate(result.model, test)[0].accuracy)
            out[fusion].append(evaluate(result.model, fresh)[0].accuracy)
    return out


def check_ablation_fusion(seeds=(0, 1, 2), **kw) -> CheckResult:
    def run():
        r = ablation_fusion(seeds, **kw)
        m = {k: float(np.mean(v)) for k, v in r.items()}
        ok = m["ca"] >= m["none"] - 0.02 and m["swa"] >= m["none"] - 0.02
        return ok, (f"mean final acc on {kw.get('eval_count', 400)} fresh clips over {len(seeds)} seeds: "
                    f"CA {m['ca']:.3f}, SWA {m['swa']:.3f}, NONE {m['none']:.3f} (CA, SWA >= NONE - 0.02); "
                    f"own test split: CA {m['split_ca']:.3f}, SWA {m['split_swa']:.3f}, "
                    f"NONE {m['split_none']:.3f}"), r
    return _timed("ablation: fusion modes", run)


QUICK_CHECKS = {
    "gradients": check_gradient_correctness,
    "boring-video": check_boring_video,
    "ca-fusion": check_ca_fusion,
    "factorization": check_factorization,
    "invariants": check_attention_invariants,
    "checkpoint": check_checkpoint,
    "metrics": check_metrics_oracle,
}
SLOW_CHECKS = {
    "end-to-end": check_end_to_end,
    "ablation-init": check_ablation_init,
    "ablation-fusion": check_ablation_fusion,
}


def run_checks(names=None, full: bool = False, out=print) -> list:
    table = dict(QUICK_CHECKS)
    if full:
        table.update(SLOW_CHECKS)
    if names:
        unknown = [n for n in names if n not in QUICK_CHECKS and n not in SLOW_CHECKS]
        if unknown:
            raise ValueError(f"unknown check(s) {unknown}; known: {', '.join(list(QUICK_CHECKS) + list(SLOW_CHECKS))}")
        table = {n: QUICK_CHECKS.get(n) or SLOW_CHECKS[n] for n in names}
    results = []
    for fn in table.values():
        r = fn()
        out(r.line())
        results.append(r)
    out(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return results
