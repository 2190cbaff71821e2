"""Finite-difference verification of every analytic backward pass.

Each registered check builds a small seeded instance, reduces the forward
output against a fixed random projection so the objective is scalar, and
compares the analytic gradient of every parameter group with 64-bit central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import (
    cross_attention_backward,
    cross_attention_forward,
    encode_points,
    encode_points_backward,
    init_attention_params,
    init_point_encoder,
)
from .encoder import (
    encode_plane,
    encode_plane_backward,
    fuse_scales,
    fuse_scales_backward,
    init_encoder_params,
)

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    op: str
    seed: int
    eps: float
    errors: dict = field(default_factory=dict)  # group name -> max rel. error

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_error < tol

    def lines(self, tol: float = DEFAULT_TOL):
        out = [f"gradcheck {self.op} (seed={self.seed}, eps={self.eps:g})"]
        for name, err in self.errors.items():
            flag = "ok" if err < tol else "FAIL"
            out.append(f"  {name:<16} max rel err {err:.3e}  [{flag}]")
        return out


def finite_difference(fn, x, eps=DEFAULT_EPS):
    """Central-difference gradient of scalar fn() w.r.t. x, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite forward value at the probe point")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _compare_groups(objective, groups, analytic, eps):
    """FD every group against its analytic gradient; returns the error dict."""
    errors = {}
    for name, arr in groups.items():
        numeric = finite_difference(objective, arr, eps)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors


# ---------------------------------------------------------------------------
# Registered checks
# ---------------------------------------------------------------------------


def _check_linear(rng, eps):
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    r = rng.normal(size=(7, 4))

    def objective():
        return float((ops.linear_forward(x, w, b)[0] * r).sum())

    out, cache = ops.linear_forward(x, w, b)
    dx, dw, db = ops.linear_backward(r, cache)
    analytic = {"input": dx, "weight": dw, "bias": db}
    return _compare_groups(objective, {"input": x, "weight": w, "bias": b}, analytic, eps)


def _check_leaky_relu(rng, eps):
    x = rng.normal(size=(6, 5)) + np.sign(rng.normal(size=(6, 5))) * 0.05
    r = rng.normal(size=(6, 5))

    def objective():
        return float((ops.leaky_relu_forward(x, 0.1)[0] * r).sum())

    _, cache = ops.leaky_relu_forward(x, 0.1)
    return _compare_groups(objective, {"input": x}, {"input": ops.leaky_relu_backward(r, cache)}, eps)


def _check_conv(rng, eps):
    x = rng.normal(size=(6, 7, 3))
    w = rng.normal(size=(3, 3, 3, 4)) * 0.5
    b = rng.normal(size=4)
    r = rng.normal(size=(3, 4, 4))

    def objective():
        return float((ops.conv2d_forward(x, w, b)[0] * r).sum())

    _, cache = ops.conv2d_forward(x, w, b)
    dx, dw, db = ops.conv2d_backward(r, cache)
    analytic = {"input": dx, "weight": dw, "bias": db}
    return _compare_groups(objective, {"input": x, "weight": w, "bias": b}, analytic, eps)


def _check_bilinear_resize(rng, eps):
    x = rng.normal(size=(5, 6, 3))
    r = rng.normal(size=(9, 11, 3))

    def objective():
        return float((ops.bilinear_resize_forward(x, 9, 11)[0] * r).sum())

    _, cache = ops.bilinear_resize_forward(x, 9, 11)
    return _compare_groups(
        objective, {"input": x}, {"input": ops.bilinear_resize_backward(r, cache)}, eps
    )


def _check_bilinear_sample(rng, eps):
    fmap = rng.normal(size=(6, 8, 4))
    u = rng.uniform(0.3, 6.7, size=12)
    v = rng.uniform(0.3, 4.7, size=12)
    r = rng.normal(size=(12, 4))

    def objective():
        return float((ops.bilinear_sample_forward(fmap, u, v)[0] * r).sum())

    _, cache = ops.bilinear_sample_forward(fmap, u, v)
    return _compare_groups(
        objective, {"fmap": fmap}, {"fmap": ops.bilinear_sample_backward(r, cache)}, eps
    )


def _check_point_encoder(rng, eps):
    positions = rng.uniform(-2, 2, size=(10, 3))
    feats = rng.normal(size=(10, 4))
    params = init_point_encoder(4, 6, rng=rng)
    params.b1 += rng.normal(scale=0.05, size=params.b1.shape)
    params.b2 += rng.normal(scale=0.05, size=params.b2.shape)
    r = rng.normal(size=(10, 6))
    groups = {"feats": feats, "w1": params.w1, "b1": params.b1,
              "w2": params.w2, "b2": params.b2}

    def objective():
        out, _ = encode_points(positions, feats, params, voxel_size=1.3)
        return float((out * r).sum())

    out, cache = encode_points(positions, feats, params, voxel_size=1.3)
    dfeats, grads = encode_points_backward(r, cache)
    analytic = {"feats": dfeats, **grads}
    return _compare_groups(objective, groups, analytic, eps)


def _check_positional_embedding(rng, eps):
    offsets = rng.normal(size=(5, 6, 3))
    w_pos = rng.normal(size=(3, 8))
    r = rng.normal(size=(5, 6, 8))
    groups = {"offsets": offsets, "w_pos": w_pos}

    def objective():
        return float(((offsets @ w_pos) * r).sum())

    d_off = r @ w_pos.T
    dw = offsets.reshape(-1, 3).T @ r.reshape(-1, 8)
    return _compare_groups(objective, groups, {"offsets": d_off, "w_pos": dw}, eps)


def _attention_instance(rng, n=7, m=6, c_p=5, c_f=4, heads=2, head_dim=3):
    point_feats = rng.normal(size=(n, c_p))
    gathered = rng.normal(size=(n, m, c_f))
    valid = rng.uniform(size=(n, m)) > 0.3
    valid[:, 0] = True  # every point keeps at least one plane
    gathered[~valid] = 0.0
    offsets = rng.normal(size=(n, m, 3))
    offsets[~valid] = 0.0
    params = init_attention_params(c_p, c_f, heads=heads, head_dim=head_dim,
                                   c_out=6, rng=rng)
    return point_feats, gathered, valid, offsets, params


def _check_attention(rng, eps):
    point_feats, gathered, valid, offsets, params = _attention_instance(rng)
    r = rng.normal(size=(point_feats.shape[0], params.w_out.shape[1]))
    groups = {
        "point_feats": point_feats,
        "gathered": gathered,
        "offsets": offsets,
        "w_query": params.w_query,
        "w_key": params.w_key,
        "w_value": params.w_value,
        "w_pos": params.w_pos,
        "w_out": params.w_out,
    }

    def objective():
        out, _ = cross_attention_forward(point_feats, gathered, valid, offsets, params)
        return float((out * r).sum())

    out, cache = cross_attention_forward(point_feats, gathered, valid, offsets, params)
    analytic = cross_attention_backward(r, cache)
    return _compare_groups(objective, groups, analytic, eps)


def _check_encoder(rng, eps):
    raster = rng.normal(size=(7, 9, 2))
    params = init_encoder_params(2, widths=(3, 4, 5), out_channels=4, rng=rng)
    # biases off zero so no pre-activation sits on the rectifier kink
    for b in (*params.conv_b, params.mix_b):
        b += rng.normal(scale=0.05, size=b.shape)
    groups = {"raster": raster}
    for i in range(3):
        groups[f"conv{i}/W"] = params.conv_w[i]
        groups[f"conv{i}/b"] = params.conv_b[i]
    groups["mix/W"] = params.mix_w
    groups["mix/b"] = params.mix_b

    pyramid, _ = encode_plane(raster, params)
    fused, _ = fuse_scales(pyramid, params)
    r = rng.normal(size=fused.data.shape)

    def objective():
        pyr, _ = encode_plane(raster, params)
        f, _ = fuse_scales(pyr, params)
        return float((f.data * r).sum())

    pyramid, enc_cache = encode_plane(raster, params)
    fused, fuse_cache = fuse_scales(pyramid, params)
    grad_pyramid, mix_grads = fuse_scales_backward(r, fuse_cache)
    draster, conv_grads = encode_plane_backward(grad_pyramid, enc_cache)
    analytic = {"raster": draster, **conv_grads, **mix_grads}
    return _compare_groups(objective, groups, analytic, eps)


def _check_loss(rng, eps):
    logits = rng.normal(size=(9, 4))
    labels = rng.integers(0, 4, size=9)
    labels[rng.uniform(size=9) < 0.2] = -1
    if (labels == -1).all():
        labels[0] = 0

    def objective():
        return ops.softmax_cross_entropy(logits, labels)[0]

    _, dlogits, _ = ops.softmax_cross_entropy(logits, labels)
    return _compare_groups(objective, {"logits": logits}, {"logits": dlogits}, eps)


def _check_model(rng, eps):
    # imported lazily: model depends on this module's consumers
    from .model import micro_model_check

    return micro_model_check(rng, eps)


CHECKS = {
    "linear": _check_linear,
    "leaky_relu": _check_leaky_relu,
    "conv": _check_conv,
    "bilinear_resize": _check_bilinear_resize,
    "bilinear_sample": _check_bilinear_sample,
    "point_encoder": _check_point_encoder,
    "positional_embedding": _check_positional_embedding,
    "attention": _check_attention,
    "encoder": _check_encoder,
    "loss": _check_loss,
    "model": _check_model,
}


def grad_check(op, seed=0, eps=DEFAULT_EPS) -> GradCheckReport:
    """Run the named check; see CHECKS for the registry."""
    if op not in CHECKS:
        raise ValueError(f"unknown gradcheck op {op!r}; known: {sorted(CHECKS)}")
    rng = np.random.default_rng(seed)
    errors = CHECKS[op](rng, eps)
    return GradCheckReport(op=op, seed=seed, eps=eps, errors=errors)
