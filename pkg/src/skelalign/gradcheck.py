"""Central-difference verification of every analytic backward pass.

Each target builds a small fp64 instance of one layer or loss, a scalar
objective, and the matching analytic gradients; the harness perturbs every
parameter coordinate by +-step and compares.  Inputs near a ReLU or max-pool
tie would make finite differences lie, so builders resample until the
smallest activation margin clears the perturbation by a wide factor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import layers, losses
from .encoder import EncoderConfig, EncoderModel
from .graph import build_partition, build_skeleton

MARGIN = 3e-4
MAX_BUILD_ATTEMPTS = 200


def fd_max_rel_err(value_fn, params: dict[str, np.ndarray],
                   analytic: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Worst relative error between analytic grads and central differences.

    Relative error per coordinate is |a - f| / max(|a|, |f|, 1e-3); the
    floor keeps near-zero coordinates measurable without drowning real
    mismatches.
    """
    worst = 0.0
    for name, arr in params.items():
        a_grad = analytic.get(name)
        if a_grad is None:
            a_grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value_fn()
            flat[i] = orig - step
            down = value_fn()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            a = float(a_grad.reshape(-1)[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst = max(worst, err)
    return worst


def _rng(seed: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=[seed, attempt]))


def _random_adjacency(rng, n: int) -> np.ndarray:
    from .graph import normalize_adjacency
    edges = [(i, int(rng.integers(i))) for i in range(1, n)]  # random spanning tree
    return normalize_adjacency(edges, n)


def _projection_objective(layer, x, r):
    def value():
        return float((layer.forward(x) * r).sum())

    def grad():
        layer.forward(x)
        dx = layer.backward(r)
        return {**{k: v for k, v in layer.grads.items()}, "x": dx}

    return value, grad


def _block_margin(block, x) -> float:
    gx = block.gc.forward(x)
    h = block.bn.forward(block.mtc.forward(gx), True)
    r = x if block.residual is None else block.residual.forward(x)
    margin = float(np.abs(h + r).min())
    pool = block.mtc.ops[2]
    margin = min(margin, pool.tie_margin(block.mtc.reduce[2].forward(gx)))
    return margin


# -- target builders: each returns (params, value_fn, grad_fn, margin) ----


def _t_classifier(rng):
    lin = layers.Linear(5, 4, rng, np.float64)
    x = rng.standard_normal((3, 5))
    r = rng.standard_normal((3, 4))
    value, grad = _projection_objective(lin, x, r)
    return {**lin.params, "x": x}, value, grad, np.inf


def _t_graph_conv(rng):
    adj = _random_adjacency(rng, 4)
    gc = layers.GraphConv(adj, 3, 4, rng, np.float64)
    x = rng.standard_normal((2, 3, 4, 3))
    r = rng.standard_normal((2, 3, 4, 4))
    value, grad = _projection_objective(gc, x, r)
    return {**gc.params, "x": x}, value, grad, np.inf


def _t_pointwise(rng):
    pw = layers.PointwiseConv(3, 4, rng, np.float64, stride=2)
    x = rng.standard_normal((2, 5, 3, 3))
    r = rng.standard_normal((2, 3, 3, 4))
    value, grad = _projection_objective(pw, x, r)
    return {**pw.params, "x": x}, value, grad, np.inf


def _t_tconv(dilation, stride):
    def build(rng):
        tc = layers.TemporalConv(2, 3, 5, dilation, stride, rng, np.float64)
        x = rng.standard_normal((2, 7, 3, 2))
        r = rng.standard_normal((2, layers.out_frames(7, stride), 3, 3))
        value, grad = _projection_objective(tc, x, r)
        return {**tc.params, "x": x}, value, grad, np.inf
    return build


def _t_maxpool(rng):
    mp = layers.TemporalMaxPool(2)
    x = rng.standard_normal((2, 7, 3, 2))
    r = rng.standard_normal((2, 4, 3, 2))
    value, grad = _projection_objective(mp, x, r)
    return {"x": x}, value, grad, mp.tie_margin(x)


def _t_batchnorm(rng):
    bn = layers.BatchNorm(3, np.float64)
    x = rng.standard_normal((2, 4, 3, 3))
    r = rng.standard_normal((2, 4, 3, 3))

    def value():
        return float((bn.forward(x, True) * r).sum())

    def grad():
        bn.forward(x, True)
        dx = bn.backward(r)
        return {**bn.grads, "x": dx}

    return {**bn.params, "x": x}, value, grad, np.inf


def _t_mtc(rng):
    mtc = layers.MultiScaleTemporal(8, 2, rng, np.float64)
    x = rng.standard_normal((1, 6, 3, 8))
    r = rng.standard_normal((1, 3, 3, 8))
    value, grad = _projection_objective(mtc, x, r)

    def grad_full():
        mtc.forward(x)
        dx = mtc.backward(r)
        out = {"x": dx}
        for name, layer in mtc.sublayers():
            for pname, g in layer.grads.items():
                out[f"{name}.{pname}"] = g
        return out

    params = {"x": x}
    for name, layer in mtc.sublayers():
        for pname, arr in layer.params.items():
            params[f"{name}.{pname}"] = arr
    margin = mtc.ops[2].tie_margin(mtc.reduce[2].forward(x))
    return params, value, grad_full, margin


def _block_target(in_dim, out_dim, stride):
    def build(rng):
        adj = _random_adjacency(rng, 4)
        block = layers.EncoderBlock(adj, in_dim, out_dim, stride, rng, np.float64)
        x = rng.standard_normal((2, 6, 4, in_dim))
        r = rng.standard_normal((2, layers.out_frames(6, stride), 4, out_dim))

        def value():
            return float((block.forward(x, True) * r).sum())

        def grad():
            block.forward(x, True)
            dx = block.backward(r)
            out = {"x": dx}
            for name, layer in block.sublayers():
                for pname, g in layer.grads.items():
                    out[f"{name}.{pname}"] = g
            return out

        params = {"x": x}
        for name, layer in block.sublayers():
            for pname, arr in layer.params.items():
                params[f"{name}.{pname}"] = arr
        return params, value, grad, _block_margin(block, x)
    return build


def _toy_model(rng):
    graph = build_skeleton("toy10")
    partition = build_partition("two_part", graph)
    config = EncoderConfig(num_classes=3, head_dim=4, channels=(8, 8), strides=(1, 2))
    model = EncoderModel(config, graph, partition, rng=rng, dtype=np.float64)
    # Tighten init spread so toy activations stay O(1).
    x = 0.5 * rng.standard_normal((3, 3, 6, 10))
    labels = rng.integers(0, 3, size=3)
    return model, x, labels


def _t_pooling_heads(rng):
    # Part pooling, global pooling (through the global slot), and every
    # projection head, without the classifier in the way.
    model, x, _ = _toy_model(rng)
    rp = rng.standard_normal((model.num_slots, 3, model.config.head_dim))

    def value():
        out = model.forward(x, train=True)
        return float((out.part_features * rp).sum())

    def grad():
        model.forward(x, train=True)
        model.backward(dlogits=None, dpart_features=rp)
        return model.grads()

    return dict(model.params()), value, grad, model.relu_tie_margin(x)


def _t_model_ce(rng):
    model, x, labels = _toy_model(rng)

    def value():
        out = model.forward(x, train=True, compute_parts=False)
        return losses.cross_entropy(out.logits, labels)

    def grad():
        out = model.forward(x, train=True, compute_parts=False)
        model.backward(losses.cross_entropy_grad(out.logits, labels))
        return model.grads()

    return dict(model.params()), value, grad, model.relu_tie_margin(x)


def _t_model_gap(rng):
    model, x, labels = _toy_model(rng)
    text = rng.standard_normal((model.num_slots, 3, model.config.head_dim))
    text /= np.linalg.norm(text, axis=2, keepdims=True)
    lam, tau = 0.8, 0.1

    def value():
        out = model.forward(x, train=True)
        ce = losses.cross_entropy(out.logits, labels)
        slot = [losses.contrastive_loss(
            *losses.similarity_distributions(
                losses.ContrastBatch(out.part_features[k], text[k], labels, tau)),
            losses.build_targets(labels), "kld") for k in range(model.num_slots)]
        return losses.total_loss(ce, losses.multi_part_loss(slot), lam)

    def grad():
        out = model.forward(x, train=True)
        dlogits = losses.cross_entropy_grad(out.logits, labels)
        dparts = np.stack([
            losses.contrastive_loss_and_grad(
                losses.ContrastBatch(out.part_features[k], text[k], labels, tau), "kld")[1]
            for k in range(model.num_slots)]) * (lam / model.num_slots)
        model.backward(dlogits, dparts)
        return model.grads()

    return dict(model.params()), value, grad, model.relu_tie_margin(x)


def _t_ce_loss(rng):
    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, size=4)

    def value():
        return losses.cross_entropy(logits, labels)

    def grad():
        return {"logits": losses.cross_entropy_grad(logits, labels)}

    return {"logits": logits}, value, grad, np.inf


def _contrastive_target(variant):
    def build(rng):
        skel = rng.standard_normal((5, 6))
        text = rng.standard_normal((5, 6))
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        labels = rng.integers(0, 3, size=5)
        tau = 0.1

        def value():
            cb = losses.ContrastBatch(skel, text, labels, tau)
            p_a, p_b = losses.similarity_distributions(cb)
            return losses.contrastive_loss(p_a, p_b, losses.build_targets(labels), variant)

        def grad():
            cb = losses.ContrastBatch(skel, text, labels, tau)
            fused, dskel = losses.contrastive_loss_and_grad(cb, variant)
            assert abs(fused - value()) < 1e-12
            return {"skel": dskel}

        margin = float(np.linalg.norm(skel, axis=1).min())
        return {"skel": skel}, value, grad, margin
    return build


def _t_multi_part(rng):
    slots = 2
    skel = rng.standard_normal((slots, 4, 5))
    text = rng.standard_normal((slots, 4, 5))
    text /= np.linalg.norm(text, axis=2, keepdims=True)
    labels = rng.integers(0, 2, size=4)
    tau = 0.1

    def value():
        per_slot = []
        for k in range(slots):
            cb = losses.ContrastBatch(skel[k], text[k], labels, tau)
            p_a, p_b = losses.similarity_distributions(cb)
            per_slot.append(losses.contrastive_loss(p_a, p_b, losses.build_targets(labels), "kld"))
        return losses.multi_part_loss(per_slot)

    def grad():
        g = np.stack([
            losses.contrastive_loss_and_grad(
                losses.ContrastBatch(skel[k], text[k], labels, tau), "kld")[1]
            for k in range(slots)]) / slots
        return {"skel": g}

    return {"skel": skel}, value, grad, np.inf


def _t_total(rng):
    logits = rng.standard_normal((4, 3))
    skel = rng.standard_normal((4, 5))
    text = rng.standard_normal((4, 5))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    labels = rng.integers(0, 3, size=4)
    lam, tau = 0.8, 0.1

    def value():
        cb = losses.ContrastBatch(skel, text, labels, tau)
        p_a, p_b = losses.similarity_distributions(cb)
        con = losses.contrastive_loss(p_a, p_b, losses.build_targets(labels), "kld")
        return losses.total_loss(losses.cross_entropy(logits, labels), con, lam)

    def grad():
        cb = losses.ContrastBatch(skel, text, labels, tau)
        _, dskel = losses.contrastive_loss_and_grad(cb, "kld")
        return {"logits": losses.cross_entropy_grad(logits, labels), "skel": lam * dskel}

    return {"logits": logits, "skel": skel}, value, grad, np.inf


def _t_part_cls(rng):
    part_logits = rng.standard_normal((3, 4, 3))
    labels = rng.integers(0, 3, size=4)

    def value():
        return losses.part_cls_baseline_loss(part_logits, labels)

    def grad():
        return {"part_logits": losses.part_cls_baseline_grad(part_logits, labels)}

    return {"part_logits": part_logits}, value, grad, np.inf


TARGETS = {
    "layer/classifier": _t_classifier,
    "layer/graph_conv": _t_graph_conv,
    "layer/pointwise_conv": _t_pointwise,
    "layer/temporal_conv_d1": _t_tconv(1, 1),
    "layer/temporal_conv_d2": _t_tconv(2, 2),
    "layer/temporal_maxpool": _t_maxpool,
    "layer/batchnorm": _t_batchnorm,
    "layer/multiscale_temporal": _t_mtc,
    "layer/block_identity_residual": _block_target(8, 8, 1),
    "layer/block_conv_residual": _block_target(4, 8, 2),
    "layer/pooling_and_heads": _t_pooling_heads,
    "model/cross_entropy": _t_model_ce,
    "model/gap_objective": _t_model_gap,
    "loss/cross_entropy": _t_ce_loss,
    "loss/kld": _contrastive_target("kld"),
    "loss/cl": _contrastive_target("cl"),
    "loss/jsd": _contrastive_target("jsd"),
    "loss/multi_part": _t_multi_part,
    "loss/total": _t_total,
    "loss/part_cls": _t_part_cls,
}


@dataclass
class GradcheckResult:
    target: str
    seed: int
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    tol: float
    results: list[GradcheckResult] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.results)

    def worst_by_target(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for r in self.results:
            worst[r.target] = max(worst.get(r.target, 0.0), r.max_rel_err)
        return worst

    def format_lines(self) -> list[str]:
        lines = []
        for target, err in sorted(self.worst_by_target().items()):
            status = "ok" if all(r.passed for r in self.results if r.target == target) else "FAIL"
            lines.append(f"{status:4s} {target:32s} max rel err {err:.3e}")
        lines.append(f"{'ok' if self.all_pass else 'FAIL':4s} total "
                     f"({len(self.results)} checks, {self.elapsed_s:.1f}s)")
        return lines


def _build_target(builder, seed: int):
    for attempt in range(MAX_BUILD_ATTEMPTS):
        params, value, grad, margin = builder(_rng(seed, attempt))
        if margin >= MARGIN:
            return params, value, grad
    raise RuntimeError("could not find a kink-free instance; margins too tight")


def gradcheck_suite(seeds: int = 20, tol: float = 1e-5, step: float = 1e-5,
                    targets=None, _negate=()) -> GradcheckReport:
    """Run every target over the given number of seeds.

    ``_negate`` flips the sign of the analytic gradients of the named
    targets; it exists so tests can prove the harness catches bad gradients.
    """
    report = GradcheckReport(tol=tol)
    start = time.monotonic()
    chosen = TARGETS if targets is None else {t: TARGETS[t] for t in targets}
    with threadpool_limits(limits=1):
        for name, builder in chosen.items():
            for seed in range(seeds):
                params, value, grad = _build_target(builder, 1000 + seed)
                analytic = grad()
                if name in _negate:
                    analytic = {k: -v for k, v in analytic.items()}
                err = fd_max_rel_err(value, params, analytic, step=step)
                report.results.append(GradcheckResult(name, seed, err, bool(err < tol)))
    report.elapsed_s = time.monotonic() - start
    return report
