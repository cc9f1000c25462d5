"""Finite-difference checks for every differentiable piece, grouped for the CLI."""
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import ops
from .arfm import ARFM
from .dcnv3 import DCNv3Block, DCNv3Params, OffsetField, dcnv3_apply
from .gradcheck import gradcheck
from .losses import CTLossConfig, KappaState, ct_loss, cross_entropy, tvmf_dice_loss
from .model import SACNet, SACNetConfig
from .tensor import Tensor, precision

Check = Tuple[str, Callable[[Tensor], Tensor], np.ndarray]
# Deep compositions use the 4-point stencil at a larger step, with a
# coordinate subsample to bound runtime. Entries under 1e-7 (peak is ~10) sit
# below finite-difference resolution and are judged on absolute error.
MODEL_PROBE = dict(eps=1e-4, stencil=4, max_coords=1024, abs_floor=1e-7)


def _weighted(rng, shape):
    w = Tensor(rng.standard_normal(shape))
    return lambda out: (out * w).sum()


def primitive_checks(rng: np.random.Generator) -> List[Check]:
    R = rng.standard_normal
    pos = rng.uniform(0.5, 2.0, (3, 4))
    other = R((3, 4))
    img = R((2, 3, 5, 5))
    conv_w, conv_b = R((4, 3, 3, 3)), R(4)
    gamma, beta = R(3), R(3)
    lin_w, lin_b = R((5, 3)), R(5)
    rows = rng.uniform(-1.5, 5.5, (2, 7))
    cols = rng.uniform(-1.5, 5.5, (2, 7))
    small = R((3, 5, 5))
    point = rng.uniform(0.2, 3.8, 2)
    T = Tensor
    r34 = _weighted(rng, (3, 4))
    checks = [
        ("add", lambda x: r34(x + T(other)), R((3, 4))),
        ("add_broadcast", lambda x: r34(T(other) + x), R((1, 4))),
        ("sub", lambda x: r34(T(other) - x), R((3, 4))),
        ("mul", lambda x: r34(x * x), R((3, 4))),
        ("div", lambda x: r34(T(other) / x), pos),
        ("neg", lambda x: r34(-x), R((3, 4))),
        ("pow", lambda x: r34(x ** 3), R((3, 4))),
        ("exp", lambda x: r34(x.exp()), R((3, 4))),
        ("log", lambda x: r34(x.log()), pos),
        ("sqrt", lambda x: r34(x.sqrt()), pos),
        ("tanh", lambda x: r34(x.tanh()), R((3, 4))),
        ("clamp_min", lambda x: r34(x.clamp_min(0.0)), pos - 1.25),
        ("gelu", lambda x: r34(ops.gelu(x)), R((3, 4))),
        ("sum_axis", lambda x: _weighted(np.random.default_rng(1), (3,))(x.sum(axis=1)), R((3, 4))),
        ("reshape", lambda x: _weighted(np.random.default_rng(2), (4, 3))(x.reshape(4, 3)), R((3, 4))),
        ("transpose", lambda x: _weighted(np.random.default_rng(3), (4, 3))(x.transpose(1, 0)), R((3, 4))),
        ("getitem", lambda x: _weighted(np.random.default_rng(4), (2, 2))(x[1:, 1:3]), R((3, 4))),
        ("concat", lambda x: _weighted(np.random.default_rng(5), (3, 8))(ops.concat([x, x * x], axis=1)),
         R((3, 4))),
        ("softmax", lambda x: r34(ops.softmax(x, axis=1)), R((3, 4))),
        ("layernorm", lambda x: _weighted(np.random.default_rng(6), img.shape)(
            ops.layernorm(x, T(gamma), T(beta))), R(img.shape)),
        ("layernorm_affine", lambda g: _weighted(np.random.default_rng(7), img.shape)(
            ops.layernorm(T(img), g, T(beta))), gamma.copy()),
        ("conv2d_input", lambda x: _weighted(np.random.default_rng(8), (2, 4, 3, 3))(
            ops.conv2d(x, T(conv_w), T(conv_b), stride=2, padding=1)), R(img.shape)),
        ("conv2d_weight", lambda w: _weighted(np.random.default_rng(9), (2, 4, 5, 5))(
            ops.conv2d(T(img), w, T(conv_b), padding=1)), conv_w.copy()),
        ("conv2d_bias", lambda b: _weighted(np.random.default_rng(10), (2, 4, 5, 5))(
            ops.conv2d(T(img), T(conv_w), b, padding=1)), conv_b.copy()),
        ("channel_linear", lambda w: _weighted(np.random.default_rng(11), (2, 5, 5, 5))(
            ops.channel_linear(T(img), w, T(lin_b))), lin_w.copy()),
        ("bilinear_gather_image", lambda x: _weighted(np.random.default_rng(12), (2, 3, 7))(
            ops.bilinear_gather(x, T(rows), T(cols))), R((2, 3, 5, 5))),
        ("bilinear_gather_rows", lambda r: _weighted(np.random.default_rng(13), (2, 3, 7))(
            ops.bilinear_gather(T(img), r, T(cols))), rows.copy()),
        ("bilinear_gather_cols", lambda c: _weighted(np.random.default_rng(14), (2, 3, 7))(
            ops.bilinear_gather(T(img), T(rows), c)), cols.copy()),
        ("bilinear_sample_point", lambda p: _weighted(np.random.default_rng(15), (3,))(
            ops.bilinear_sample(T(small), p)), point),
        ("bilinear_resize", lambda x: _weighted(np.random.default_rng(16), (2, 3, 9, 4))(
            ops.bilinear_resize(x, 9, 4)), R(img.shape)),
    ]
    return checks


def dcnv3_checks(rng: np.random.Generator) -> List[Check]:
    B, C, H, W, G, K = 2, 4, 6, 6, 2, 9
    p = DCNv3Params(C, G, K, rng=rng)
    x0 = rng.standard_normal((B, C, H, W))
    off0 = rng.uniform(-1.3, 1.3, (B, G, K, 2, H, W))
    logit0 = rng.standard_normal((B, G, K, H, W))
    w0 = p.proj.data.copy() * 20.0
    reduce = _weighted(rng, (B, C, H, W))

    def apply(x=None, off=None, logits=None, w=None):
        x = Tensor(x0) if x is None else x
        off = Tensor(off0) if off is None else off
        logits = Tensor(logit0) if logits is None else logits
        w = Tensor(w0) if w is None else w
        field = OffsetField(off, ops.softmax(logits, axis=2))
        return reduce(dcnv3_apply(x, field, p, proj=w))

    block = DCNv3Block(C, G, K, rng=rng)
    for conv in (block.core.offset_gen, block.core.modulation_gen):
        conv.weight.data = rng.normal(0.0, 0.3, conv.weight.shape)
        conv.bias.data = rng.normal(0.0, 0.3, conv.bias.shape)
    for lin in (block.input_proj, block.output_proj):
        lin.weight.data = rng.normal(0.0, 0.5, lin.weight.shape)
    block.core.proj.data = rng.normal(0.0, 0.5, block.core.proj.shape)

    x8 = rng.standard_normal((2, 4, 8, 8))
    return [
        ("dcnv3_apply_input", lambda x: apply(x=x), x0.copy()),
        ("dcnv3_apply_offsets", lambda o: apply(off=o), off0.copy()),
        ("dcnv3_apply_modulation_logits", lambda m: apply(logits=m), logit0.copy()),
        ("dcnv3_apply_projection", lambda w: apply(w=w), w0.copy()),
        ("dcnv3_block_input", lambda x: block(x).sum(), x8),
    ]


def _perturb(module, rng, scale=0.3):
    for prm in module.parameters():
        prm.data = prm.data + rng.normal(0.0, scale, prm.shape)


def arfm_checks(rng: np.random.Generator) -> List[Check]:
    blk = ARFM(4, 2, ffn_ratio=2, rng=rng)
    _perturb(blk, rng)
    blk.eval()
    x0 = rng.standard_normal((1, 4, 5, 5))
    return [("arfm_forward", lambda x: _weighted(np.random.default_rng(21), x0.shape)(blk(x)), x0)]


def loss_checks(rng: np.random.Generator) -> List[Check]:
    B, N, H, W = 2, 3, 4, 4
    labels = rng.integers(0, N, (B, H, W))
    onehot = (labels[:, None] == np.arange(N)[None, :, None, None]).astype(float)
    logits = rng.standard_normal((B, N, H, W))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ks = KappaState(np.array([3.0, 10.0, 0.5]), 32.0)
    cfg = CTLossConfig(num_classes=N)
    y = Tensor(onehot)
    return [
        ("ct_loss_probs", lambda p: ct_loss(p, y, ks, cfg), probs),
        ("ct_loss_logits", lambda z: ct_loss(ops.softmax(z, axis=1), y, ks, cfg), logits),
        ("tvmf_dice_loss", lambda p: tvmf_dice_loss(p, y, ks, cfg), probs),
        ("cross_entropy", lambda p: cross_entropy(p, y), probs),
    ]


def model_checks(rng: np.random.Generator) -> List[Check]:
    model = SACNet(SACNetConfig.micro(), rng)
    # Offsets biased to fractional positions with small input dependence, so
    # the bilinear kinks at integer coordinates stay outside the probe steps.
    for blk in model.modules():
        if isinstance(blk, DCNv3Params):
            for conv in (blk.offset_gen, blk.modulation_gen):
                conv.weight.data = rng.normal(0.0, 0.002, conv.weight.shape)
            blk.offset_gen.bias.data = rng.uniform(0.3, 0.7, blk.offset_gen.bias.shape)
            blk.modulation_gen.bias.data = rng.normal(0.0, 0.5, blk.modulation_gen.bias.shape)
    model.eval()
    x0 = rng.random((1, 3, 32, 32))
    reduce = _weighted(np.random.default_rng(31), (1, 4, 32, 32))
    return [("model_forward_input", lambda x: reduce(model(x)), x0)]


GROUPS: Dict[str, Callable] = {
    "primitives": primitive_checks,
    "dcnv3": dcnv3_checks,
    "arfm": arfm_checks,
    "losses": loss_checks,
    "model": model_checks,
}


def run_checks(op: str = "all", tol: float = 1e-4, seed: int = 0, model_tol: float = 1e-3):
    """Yield (group, name, report, tol) for the requested group(s)."""
    names = list(GROUPS) if op == "all" else [op]
    for group in names:
        if group not in GROUPS:
            raise ValueError(f"unknown gradcheck group {group!r}; choose from all, {', '.join(GROUPS)}")
        with precision("float64"):
            checks = GROUPS[group](np.random.default_rng(seed))
        limit = max(tol, model_tol) if group == "model" else tol
        extra = MODEL_PROBE if group == "model" else {}
        for name, fn, point in checks:
            yield group, name, gradcheck(fn, point, tol=limit, **extra), limit
