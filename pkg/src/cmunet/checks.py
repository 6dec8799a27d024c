"""One-shot verification suites: gradients, scan equivalence, metrics.

Each suite returns a list of CheckResult rows; the CLI prints them and
the acceptance tests assert on them, so there is a single source of truth
for what "verified" means.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import data as D
from . import functional as F
from . import nn
from . import scan2d
from . import ssm
from . import tensor as T
from .blocks import CSAttention, CSMambaBlock, CsMambaBlockConfig, MSAA
from .losses import cross_entropy, dice_loss, total_loss
from .metrics import ConfusionMatrix, compute_metrics
from .model import ModelConfig, ModelOutputs, build_model
from .tensor import Tensor

GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float = None
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  measured={self.measured:.3e}" if self.measured is not None else ""
        tail = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}{extra}{tail}"


def _rel_err(analytic, reference, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(reference), np.abs(analytic)), floor)
    return float((np.abs(analytic - reference) / denom).max())


def _fd_check(name, make_loss, x, h=FD_STEP):
    """Analytic gradient of ``make_loss`` w.r.t. x against central differences."""
    x.grad = None
    make_loss(x).backward()
    analytic = x.grad.copy()
    fd = T.finite_diff_grad(make_loss, x, h).data
    err = _rel_err(analytic, fd)
    return CheckResult(name, err <= GRAD_TOL, err)


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64, requires_grad=True)


def _fixed(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def grad_suite(seed=0):
    """Finite-difference validation of every differentiable operation and
    the end-to-end mini model."""
    rng = np.random.default_rng(seed)
    T.set_seed(seed)
    results = []

    # core ops; each probe tensor carries well over 20 elements
    x = _rand(rng, (3, 7))
    w = _rand(rng, (5, 7))
    b = _rand(rng, (5,))
    r = _fixed(rng, (3, 5))
    results.append(_fd_check("grad/linear/x", lambda t: (F.linear(t, w, b) * r).sum(), x))
    results.append(_fd_check("grad/linear/w", lambda t: (F.linear(x, t, b) * r).sum(), w))
    results.append(_fd_check("grad/linear/b", lambda t: (F.linear(x, w, t) * r).sum(), b))

    xc = _rand(rng, (2, 3, 6, 6))
    wc = _rand(rng, (4, 3, 3, 3), 0.5)
    rc = _fixed(rng, (2, 4, 3, 3))
    conv = lambda t, ww: F.conv2d(t, ww, stride=2, padding=1)
    results.append(_fd_check("grad/conv2d/x", lambda t: (conv(t, wc) * rc).sum(), xc))
    results.append(_fd_check("grad/conv2d/w", lambda t: (conv(xc, t) * rc).sum(), wc))
    wd = _rand(rng, (3, 1, 3, 3), 0.5)
    rd = _fixed(rng, (2, 3, 6, 6))
    results.append(_fd_check(
        "grad/conv2d/depthwise",
        lambda t: (F.conv2d(xc, t, padding=1, groups=3) * rd).sum(), wd))

    xp = _rand(rng, (2, 3, 6, 6))
    rp = _fixed(rng, (2, 3, 3, 3))
    results.append(_fd_check("grad/pool/max", lambda t: (F.pool(t, "max", 2, 2) * rp).sum(), xp))
    results.append(_fd_check("grad/pool/mean", lambda t: (F.pool(t, "mean", 2, 2) * rp).sum(), xp))
    rg = _fixed(rng, (2, 3, 1, 1))
    results.append(_fd_check("grad/pool/global_mean",
                             lambda t: (F.pool(t, "global_mean") * rg).sum(), xp))
    results.append(_fd_check("grad/pool/global_max",
                             lambda t: (F.pool(t, "global_max") * rg).sum(), xp))

    xn = _rand(rng, (4, 8))
    gam = _rand(rng, (8,))
    bet = _rand(rng, (8,))
    rn = _fixed(rng, (4, 8))
    results.append(_fd_check("grad/layer_norm/x",
                             lambda t: (F.layer_norm(t, gam, bet) * rn).sum(), xn))
    results.append(_fd_check("grad/layer_norm/gamma",
                             lambda t: (F.layer_norm(xn, t, bet) * rn).sum(), gam))
    results.append(_fd_check("grad/layer_norm/beta",
                             lambda t: (F.layer_norm(xn, gam, t) * rn).sum(), bet))

    bn = nn.BatchNorm2d(3, dtype=np.float64)
    xb = _rand(rng, (2, 3, 4, 4))
    rb = _fixed(rng, (2, 3, 4, 4))
    results.append(_fd_check("grad/batch_norm/x", lambda t: (bn(t) * rb).sum(), xb))

    xa = _rand(rng, (2, 4, 3, 3))
    # keep probes away from the relu kink so the FD stencil stays one-sided
    xa.data += np.sign(xa.data) * 0.05
    ra = _fixed(rng, (2, 4, 3, 3))
    for kind in ("silu", "relu", "sigmoid", "softplus", "softmax_channel"):
        results.append(_fd_check(f"grad/activation/{kind}",
                                 lambda t, k=kind: (F.activation(k, t) * ra).sum(), xa))

    xe = _rand(rng, (2, 3, 4, 4))
    ce_map = _rand(rng, (2, 3, 1, 1))
    re = _fixed(rng, (2, 3, 4, 4))
    results.append(_fd_check("grad/elementwise/mul_broadcast",
                             lambda t: (F.elementwise("mul", xe, t) * re).sum(), ce_map))

    xr = _rand(rng, (1, 2, 4, 4))
    rr = _fixed(rng, (1, 2, 7, 5))
    results.append(_fd_check("grad/resize/bilinear",
                             lambda t: (F.resize(t, (7, 5), "bilinear") * rr).sum(), xr))
    results.append(_fd_check("grad/resize/nearest",
                             lambda t: (F.resize(t, (7, 5), "nearest") * rr).sum(), xr))

    xs = _rand(rng, (1, 2, 3, 3))
    rs = _fixed(rng, (4, 1, 9, 2))
    results.append(_fd_check("grad/cross_scan",
                             lambda t: (scan2d.cross_scan(t) * rs).sum(), xs))
    ym = _rand(rng, (4, 1, 9, 2))
    rm = _fixed(rng, (1, 2, 3, 3))
    results.append(_fd_check("grad/cross_merge",
                             lambda t: (scan2d.cross_merge(t, 3, 3) * rm).sum(), ym))

    # selective scan, sequential and parallel, through the projections
    params = ssm.SsmParams(3, 2, dtype=np.float64)
    xq = _rand(rng, (1, 5, 3), 0.5)
    rq = _fixed(rng, (1, 5, 3))
    for label, fn in (("seq", ssm.selective_scan_seq),
                      ("parallel", ssm.selective_scan_parallel)):
        def loss_x(t, fn=fn):
            return (fn(ssm.project_delta_b_c(t, params), params) * rq).sum()
        results.append(_fd_check(f"grad/selective_scan_{label}/x", loss_x, xq))
        for pname, leaf in (("A", params.A), ("D", params.D),
                            ("delta_w", params.delta_proj.weight),
                            ("b_w", params.b_proj.weight),
                            ("c_w", params.c_proj.weight)):
            def loss_p(t, fn=fn, leaf=leaf):
                old = leaf.data
                leaf.data = t.data
                try:
                    return (fn(ssm.project_delta_b_c(xq, params), params) * rq).sum()
                finally:
                    leaf.data = old
            probe = Tensor(leaf.data.copy(), dtype=np.float64, requires_grad=True)
            probe.grad = None
            leaf.grad = None
            (fn(ssm.project_delta_b_c(xq, params), params) * rq).sum().backward()
            fd = T.finite_diff_grad(lambda t, fn=fn, leaf=leaf: loss_p(t, fn, leaf), probe, FD_STEP).data
            err = _rel_err(leaf.grad, fd)
            results.append(CheckResult(f"grad/selective_scan_{label}/{pname}",
                                       err <= GRAD_TOL, err))

    # composite blocks
    T.set_seed(seed + 1)
    cs = CSAttention(4, dtype=np.float64)
    xcs = _rand(rng, (1, 4, 5, 5))
    rcs = _fixed(rng, (1, 4, 5, 5))
    results.append(_fd_check("grad/cs_attention/x", lambda t: (cs(t) * rcs).sum(), xcs))

    blk = CSMambaBlock(CsMambaBlockConfig(channels=4, state_size=2), dtype=np.float64)
    xbk = _rand(rng, (1, 4, 4, 4), 0.5)
    rbk = _fixed(rng, (1, 4, 4, 4))
    results.append(_fd_check("grad/csmamba/x", lambda t: (blk(t) * rbk).sum(), xbk))

    ms = MSAA(4, 4, 8, dtype=np.float64)
    fp = _fixed(rng, (1, 4, 8, 8))
    fn_ = _fixed(rng, (1, 8, 2, 2))
    xms = _rand(rng, (1, 4, 4, 4))
    rms = _fixed(rng, (1, 3, 4, 4))
    results.append(_fd_check("grad/msaa/x", lambda t: (ms(fp, t, fn_) * rms).sum(), xms))

    # losses
    lg = _rand(rng, (2, 4, 3, 3))
    tgt = np.random.default_rng(seed + 2).integers(0, 4, (2, 3, 3))
    results.append(_fd_check("grad/cross_entropy", lambda t: cross_entropy(t, tgt), lg))
    results.append(_fd_check("grad/dice_loss", lambda t: dice_loss(t, tgt), lg))

    results.append(_model_grad_check(seed))
    return results


def _model_grad_check(seed, n_probes=24):
    """End-to-end mini model at 64x64 against finite differences."""
    T.set_seed(seed + 3)
    model = build_model(ModelConfig(num_classes=4, state_size=4), seed=seed + 3,
                        dtype=np.float64)
    model.eval()
    rng = np.random.default_rng(seed + 4)
    x = Tensor(rng.standard_normal((1, 3, 64, 64)) * 0.5, dtype=np.float64)
    weights = None

    def loss_value():
        nonlocal weights
        out = model(x)
        pieces = [out.final_logits] + out.aux_logits
        if weights is None:
            weights = [Tensor(rng.standard_normal(p.data.shape) / np.sqrt(p.data.size),
                              dtype=np.float64) for p in pieces]
        total = None
        for p, wt in zip(pieces, weights):
            term = (p * wt).sum()
            total = term if total is None else total + term
        return total

    model.zero_grad()
    loss = loss_value()
    loss.backward()
    # below this scale a gradient is indistinguishable from central-difference
    # roundoff (eps * |loss| / h), so compare against the floor instead
    floor = 1e-5 * (1.0 + abs(loss.item()))
    params = [p for _, p in model.named_parameters()]
    picker = np.random.default_rng(seed + 5)
    worst = 0.0
    for _ in range(n_probes):
        p = params[picker.integers(0, len(params))]
        idx = np.unravel_index(picker.integers(0, p.data.size), p.data.shape)
        orig = p.data[idx]
        with T.no_grad():
            p.data[idx] = orig + FD_STEP
            up = loss_value().item()
            p.data[idx] = orig - FD_STEP
            down = loss_value().item()
            p.data[idx] = orig
        fd = (up - down) / (2 * FD_STEP)
        worst = max(worst, _rel_err(p.grad[idx], fd, floor=floor))
    return CheckResult("grad/model_end_to_end", worst <= GRAD_TOL, worst,
                       f"{n_probes} parameter probes")


def _random_scan_instance(rng, dtype, max_b=4, max_l=4096, max_d=32, max_n=16):
    b = int(rng.integers(1, max_b + 1))
    l = int(np.exp(rng.uniform(np.log(1.0), np.log(max_l)))) if max_l > 1 else 1
    d = int(rng.integers(1, max_d + 1))
    n = int(rng.integers(1, max_n + 1))
    params = ssm.SsmParams(d, n, dtype=dtype)
    si = ssm.ScanInputs(
        x=Tensor(rng.standard_normal((b, l, d)).astype(dtype)),
        delta=Tensor(np.exp(rng.uniform(np.log(1e-3), np.log(1.0), (b, l, d))).astype(dtype)),
        Bsel=Tensor(rng.standard_normal((b, l, n)).astype(dtype)),
        Csel=Tensor(rng.standard_normal((b, l, n)).astype(dtype)))
    return si, params


def scan_suite(seed=0, instances=100):
    """Parallel/sequential equivalence, discretization branches, algebraic
    properties and stability."""
    rng = np.random.default_rng(seed)
    T.set_seed(seed)
    results = []

    tolerances = {np.float32: 1e-5, np.float64: 1e-10}
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    with T.no_grad():
        for i in range(instances):
            dtype = np.float32 if i % 2 == 0 else np.float64
            si, params = _random_scan_instance(rng, dtype)
            y_seq = ssm.selective_scan_seq(si, params)
            y_par = ssm.selective_scan_parallel(si, params)
            scale = max(float(np.abs(y_seq.data).max()), 1e-30)
            rel = float(np.abs(y_par.data - y_seq.data).max()) / scale
            worst[dtype] = max(worst[dtype], rel)
    elapsed = time.perf_counter() - t0
    for dtype, tol in tolerances.items():
        results.append(CheckResult(
            f"scan/oracle_equivalence_{np.dtype(dtype).name}",
            worst[dtype] <= tol, worst[dtype],
            f"{instances} instances total, {elapsed:.1f}s"))

    # discretization branch agreement around the threshold
    worst_branch = 0.0
    for mag in (9e-5, 1.1e-4):
        for sign in (1.0, -1.0):
            u = sign * mag
            exact = np.expm1(u) / u
            series = 1.0 + u / 2.0 + u * u / 6.0
            worst_branch = max(worst_branch, abs(series - exact) / abs(exact))
    results.append(CheckResult("scan/discretize_branch_agreement",
                               worst_branch <= 1e-9, worst_branch))

    a_bar, b_bar = ssm.discretize(np.zeros(4), np.full(4, 2.0), 0.25)
    err = max(float(np.abs(a_bar - 1.0).max()), float(np.abs(b_bar - 0.5).max()))
    results.append(CheckResult("scan/discretize_zero_limit", err <= 1e-12, err))

    worst_assoc = 0.0
    for _ in range(200):
        e1, e2, e3 = (ssm.AffineScanElement(rng.uniform(-2, 2), rng.uniform(-2, 2))
                      for _ in range(3))
        h = rng.uniform(-2, 2)
        left = e3.compose(e2).compose(e1).apply(h)
        right = e3.compose(e2.compose(e1)).apply(h)
        worst_assoc = max(worst_assoc, abs(left - right) / max(abs(left), 1.0))
    results.append(CheckResult("scan/affine_composition_associative",
                               worst_assoc <= 1e-12, worst_assoc))

    # stability at L = 65536 with negative dynamics
    with T.no_grad():
        b, l, d = 1, 65536, 2
        params = ssm.SsmParams(d, 2, dtype=np.float32)
        si = ssm.ScanInputs(
            x=Tensor(rng.standard_normal((b, l, d)).astype(np.float32)),
            delta=Tensor(np.exp(rng.uniform(np.log(1e-3), np.log(1.0), (b, l, d))).astype(np.float32)),
            Bsel=Tensor(rng.standard_normal((b, l, 2)).astype(np.float32)),
            Csel=Tensor(rng.standard_normal((b, l, 2)).astype(np.float32)))
        y = ssm.selective_scan_parallel(si, params)
        finite = bool(np.isfinite(y.data).all())
    results.append(CheckResult("scan/stability_L65536", finite,
                               detail="all outputs finite"))

    # A -> 0 degenerates to a cumulative sum
    with T.no_grad():
        p0 = ssm.SsmParams(2, 1, dtype=np.float64)
        p0.A.data[:] = 0.0
        p0.D.data[:] = 0.0
        x0 = rng.standard_normal((1, 64, 2))
        si = ssm.ScanInputs(x=Tensor(x0, dtype=np.float64),
                            delta=Tensor(np.full((1, 64, 2), 0.5), dtype=np.float64),
                            Bsel=Tensor(np.ones((1, 64, 1)), dtype=np.float64),
                            Csel=Tensor(np.ones((1, 64, 1)), dtype=np.float64))
        y = ssm.selective_scan_parallel(si, p0)
        err = float(np.abs(y.data - np.cumsum(0.5 * x0, axis=1)).max())
    results.append(CheckResult("scan/unit_decay_is_cumsum", err <= 1e-12, err))
    return results


def metrics_suite(seed=0):
    """Metric formulas against exact rational evaluation; loss identities."""
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(30):
        k = int(rng.integers(2, 9))
        counts = rng.integers(0, 60, (k, k))
        if counts.sum() == 0:
            counts[0, 0] = 1
        cm = ConfusionMatrix(k, counts)
        rep = compute_metrics(cm)
        for c in range(k):
            tp = Fraction(int(counts[c, c]))
            fp = Fraction(int(counts[:, c].sum() - counts[c, c]))
            fn = Fraction(int(counts[c, :].sum() - counts[c, c]))
            prec = tp / (tp + fp) if tp + fp else Fraction(0)
            rec = tp / (tp + fn) if tp + fn else Fraction(0)
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
            iou = tp / (tp + fp + fn) if tp + fp + fn else Fraction(0)
            worst = max(worst,
                        abs(rep.per_class[c]["f1"] - float(f1)),
                        abs(rep.per_class[c]["iou"] - float(iou)),
                        abs(rep.per_class[c]["precision"] - float(prec)),
                        abs(rep.per_class[c]["recall"] - float(rec)))
        oa = Fraction(int(np.trace(counts))) / Fraction(int(counts.sum()))
        worst = max(worst, abs(rep.OA - float(oa)))
    results.append(CheckResult("metrics/rational_oracle", worst <= 1e-12, worst,
                               "30 random confusion matrices"))

    cm = ConfusionMatrix(2, [[2, 1], [1, 2]])
    rep = compute_metrics(cm)
    ok = (abs(rep.per_class[0]["f1"] - 2 / 3) < 1e-12
          and abs(rep.per_class[0]["iou"] - 0.5) < 1e-12
          and abs(rep.OA - 2 / 3) < 1e-12)
    results.append(CheckResult("metrics/worked_example", ok,
                               detail="cm=[[2,1],[1,2]]"))

    big = np.full((1, 2, 4, 4), -40.0)
    big[0, 1] = 40.0
    d = dice_loss(Tensor(big, dtype=np.float64), np.ones((1, 4, 4), dtype=np.int64))
    results.append(CheckResult("loss/dice_perfect", abs(d.item()) <= 1e-5, d.item()))

    ce = cross_entropy(Tensor(np.zeros((1, 4, 2, 2)), dtype=np.float64),
                       np.zeros((1, 2, 2), dtype=np.int64))
    err = abs(ce.item() - np.log(4.0))
    results.append(CheckResult("loss/ce_uniform_ln4", err <= 1e-6, err))

    final = Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
    tgt = rng.integers(0, 3, (1, 4, 4))
    principal = (cross_entropy(final, tgt) + dice_loss(final, tgt)).item()
    alone = total_loss(ModelOutputs(final_logits=final, aux_logits=[]), tgt).item()
    results.append(CheckResult("loss/multi_output_off_identity",
                               alone == principal, abs(alone - principal)))
    return results


SUITES = {"grads": grad_suite, "scan": scan_suite, "metrics": metrics_suite}


def run_suites(which="all", seed=0):
    names = list(SUITES) if which == "all" else [which]
    results = []
    for name in names:
        results.extend(SUITES[name](seed=seed))
    return results
