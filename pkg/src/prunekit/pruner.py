"""Layer-by-layer channel pruning pipeline.

For each prunable conv layer (every conv except the first), sampled feature
probes from the uncompressed and the partially-compressed model are turned
into a weighted least-squares system over input channels; an l1 relaxation
with a lambda search picks the kept set, and the surviving weights are refit
by ordinary least squares before the dropped producers are physically
removed from the previous conv.

A variant switch covers the full objective (gradient-weighted rows with
activation gating), its two ablations, the plain reconstruction baseline,
and a weight-magnitude baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model_io, nn, solvers

VARIANT_CPLI = "cpli"
VARIANT_NO_FL = "cpli_no_fl"
VARIANT_NO_FI = "cpli_no_fi"
VARIANT_CP_BASELINE = "cp_baseline"
VARIANT_MAGNITUDE = "magnitude"
VARIANTS = (VARIANT_CPLI, VARIANT_NO_FL, VARIANT_NO_FI, VARIANT_CP_BASELINE,
            VARIANT_MAGNITUDE)

_PROBE_CHUNK = 64


@dataclass
class PruneConfig:
    """Settings for one pruning run.

    Budgets are keyed by conv ordinal (1-based over conv layers; the first
    conv is never prunable, so valid keys start at 2).  Alternatively
    `flops_target` resolves budgets as a uniform keep fraction across all
    prunable convs, rounded up per layer.
    """

    budgets: dict[int, int] | None = None
    flops_target: float | None = None
    gamma: float = 1.0
    num_locations: int = 10
    probe_images: int = 256
    variant: str = VARIANT_CPLI
    grid_ratio: float = solvers.DEFAULT_GRID_RATIO
    tol: float = solvers.DEFAULT_TOL
    max_sweeps: int = solvers.DEFAULT_MAX_SWEEPS
    damping: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_locations < 1 or self.probe_images < 1:
            raise ValueError("num_locations and probe_images must be positive")

    def validate_for(self, spec: nn.NetworkSpec) -> None:
        convs = spec.conv_indices()
        if self.budgets is None:
            return
        for ordinal, b in self.budgets.items():
            if not 2 <= ordinal <= len(convs):
                raise ValueError(f"budget for conv {ordinal}: only convs 2..{len(convs)} "
                                 "are prunable (the first conv is never pruned)")
            c_in = spec.layers[convs[ordinal - 1]].in_channels
            if not 1 <= b <= c_in:
                raise ValueError(f"budget for conv {ordinal} must be in [1, {c_in}], "
                                 f"got {b}")


@dataclass
class FeatureProbe:
    """Sampled per-location records feeding selection and refit at one layer.

    All output-channel quantities are bias-free conv responses (the linear
    output, before the nonlinearity and with the layer bias subtracted), so
    y0 over the uncompressed input decomposes exactly into the per-input-
    channel contributions z.  Arrays are indexed [probe, out_channel] and
    z is [probe, out_channel, in_channel]; `patches` holds the compressed
    model's input receptive fields for the refit step.
    """

    layer_index: int
    y0: np.ndarray
    ystar: np.ndarray
    grad: np.ndarray
    z: np.ndarray
    patches: np.ndarray
    image_ids: np.ndarray
    locations: np.ndarray
    exhaustive: bool


def _gather_patches(x_padded: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                    kh: int, kw: int, stride: int) -> np.ndarray:
    """Receptive fields (p, c, kh, kw) for output positions (rows, cols)."""
    out = np.empty((len(rows), x_padded.shape[0], kh, kw))
    for p, (r, c) in enumerate(zip(rows, cols)):
        r0, c0 = r * stride, c * stride
        out[p] = x_padded[:, r0:r0 + kh, c0:c0 + kw]
    return out


def _slice_trace(trace: nn.ForwardTrace, i: int) -> nn.ForwardTrace:
    return nn.ForwardTrace(x=trace.x[i:i + 1],
                           outputs=[o[i:i + 1] for o in trace.outputs],
                           logits=trace.logits[i:i + 1])


def extract_probes(uncompressed: model_io.Checkpoint, compressed: model_io.Checkpoint,
                   layer_index: int, dataset: model_io.DatasetHandle,
                   config: PruneConfig) -> FeatureProbe:
    """Sample probe records for one conv layer.

    Draws `probe_images` images and `num_locations` spatial positions per
    image (without replacement; all positions when the map is smaller, with
    the `exhaustive` flag set).  y0 comes from the uncompressed model;
    ystar, the loss gradient, the input patches and the contributions z come
    from one forward+backward pass of the current compressed model per image,
    with z evaluated against the uncompressed layer weights.
    """
    layer = compressed.spec.layers[layer_index]
    if layer.kind != nn.CONV2D:
        raise ValueError(f"layer {layer_index} is {layer.kind}, not conv2d")
    kh, kw = layer.kernel
    c_out, ho, wo = compressed.spec.activation_dims()[layer_index]
    c_in = layer.in_channels

    rng = np.random.default_rng([config.seed, layer_index])
    n_avail = len(dataset)
    n_images = min(config.probe_images, n_avail)
    image_ids = np.sort(rng.choice(n_avail, size=n_images, replace=False))
    n_loc = min(config.num_locations, ho * wo)
    exhaustive = ho * wo < config.num_locations
    flat_locs = [rng.choice(ho * wo, size=n_loc, replace=False)
                 for _ in range(n_images)]

    w0 = uncompressed.params[layer_index].weights
    b0_unc = uncompressed.params[layer_index].bias
    b_cur = compressed.params[layer_index].bias
    pad = layer.padding

    total = n_images * n_loc
    y0 = np.empty((total, c_out))
    ystar = np.empty((total, c_out))
    grad = np.empty((total, c_out))
    z = np.empty((total, c_out, c_in))
    patches = np.empty((total, c_in, kh, kw))
    probe_ids = np.empty(total, dtype=np.int64)
    probe_locs = np.empty((total, 2), dtype=np.int64)

    for start in range(0, n_images, _PROBE_CHUNK):
        ids = image_ids[start:start + _PROBE_CHUNK]
        batch = dataset.images[ids]
        labels = dataset.labels[ids]
        trace_u = nn.forward_collect(uncompressed.spec, uncompressed.params, batch)
        trace_c = nn.forward_collect(compressed.spec, compressed.params, batch)
        for k in range(len(ids)):
            row = start + k
            single = _slice_trace(trace_c, k)
            grads = nn.backward_collect(compressed.spec, compressed.params, single,
                                        labels[k:k + 1])
            loc = flat_locs[row]
            rr, cc = loc // wo, loc % wo
            sl = slice(row * n_loc, (row + 1) * n_loc)
            y0[sl] = trace_u.outputs[layer_index][k][:, rr, cc].T - b0_unc
            ystar[sl] = trace_c.outputs[layer_index][k][:, rr, cc].T - b_cur
            grad[sl] = grads.activations[layer_index][0][:, rr, cc].T
            x_in = single.outputs[layer_index - 1][0] if layer_index > 0 else single.x[0]
            if pad:
                x_in = np.pad(x_in, ((0, 0), (pad, pad), (pad, pad)))
            pat = _gather_patches(x_in, rr, cc, kh, kw, layer.stride)
            patches[sl] = pat
            z[sl] = np.einsum("pjuv,ijuv->pij", pat, w0)
            probe_ids[sl] = ids[k]
            probe_locs[sl, 0] = rr
            probe_locs[sl, 1] = cc

    return FeatureProbe(layer_index=layer_index, y0=y0, ystar=ystar, grad=grad,
                        z=z, patches=patches, image_ids=probe_ids,
                        locations=probe_locs, exhaustive=exhaustive)


def build_weighted_system(probe: FeatureProbe, variant: str,
                          gamma: float = 1.0) -> solvers.WeightedSystem:
    """Assemble the selection system: one row per (probe, output channel).

    Row weights (g, s) by variant -- cpli: (grad, gamma*ystar);
    cpli_no_fl: (1, gamma*ystar); cpli_no_fi: (grad, 1); cp_baseline: (1, 1).
    Each row is b = g*y0, A[j] = g*s*z_j.
    """
    if variant == VARIANT_CPLI:
        g, s = probe.grad, gamma * probe.ystar
    elif variant == VARIANT_NO_FL:
        g, s = np.ones_like(probe.y0), gamma * probe.ystar
    elif variant == VARIANT_NO_FI:
        g, s = probe.grad, np.ones_like(probe.y0)
    elif variant == VARIANT_CP_BASELINE:
        g, s = np.ones_like(probe.y0), np.ones_like(probe.y0)
    else:
        raise ValueError(f"variant {variant!r} does not use a weighted system")
    total, c_out = probe.y0.shape
    b = (g * probe.y0).reshape(total * c_out)
    a = ((g * s)[:, :, None] * probe.z).reshape(total * c_out, -1)
    return solvers.WeightedSystem(a, b)


def select_channels(system: solvers.WeightedSystem, budget: int,
                    config: PruneConfig) -> solvers.SelectionResult:
    """Budgeted channel selection; delegates to the lambda search."""
    return solvers.lambda_search(system, budget, grid_ratio=config.grid_ratio,
                                 tol=config.tol, max_sweeps=config.max_sweeps)


def magnitude_select(weights: np.ndarray, budget: int) -> tuple[int, ...]:
    """Keep the `budget` input channels with the largest summed l1 filter norm.

    Ties go to the lower channel index.
    """
    c_in = weights.shape[1]
    if not 1 <= budget <= c_in:
        raise ValueError(f"budget must be in [1, {c_in}], got {budget}")
    norms = np.abs(weights).sum(axis=(0, 2, 3))
    order = np.argsort(-norms, kind="stable")
    return tuple(sorted(int(j) for j in order[:budget]))


@dataclass
class RefitOutcome:
    weights: np.ndarray
    bias: np.ndarray
    residual_before: float
    residual_after: float
    damping: float
    normal_residual: float
    weight_norm: float
    rhs_scale: float


def refit_layer(probe: FeatureProbe, support, old_bias: np.ndarray,
                damping: float = 0.0) -> RefitOutcome:
    """Least-squares refit of the kept-channel filters against y0.

    Targets are the unweighted uncompressed responses; the bias is refit as
    the old bias plus the mean residual per output channel.  Also reports
    the probe-set squared error before (original weights, dropped channels
    zeroed) and after the refit, plus the normal-equation residual
    ||P^T (t - P w)|| with its natural scale ||P^T t|| so optimality is
    checkable per layer.
    """
    support = np.asarray(sorted(support), dtype=np.int64)
    if len(support) == 0:
        raise ValueError("support must keep at least one channel")
    total = probe.patches.shape[0]
    kh, kw = probe.patches.shape[2], probe.patches.shape[3]
    pmat = probe.patches[:, support].reshape(total, len(support) * kh * kw)
    refit = solvers.least_squares_refit(pmat, probe.y0, (kh, kw), damping=damping)

    wmat = refit.weights.reshape(refit.weights.shape[0], -1).T
    pred = pmat @ wmat
    shift = (probe.y0 - pred).mean(axis=0)
    new_bias = old_bias + shift

    drop = probe.z[:, :, support].sum(axis=2)
    residual_before = float(((probe.y0 - drop) ** 2).sum())
    residual_after = float(((probe.y0 - pred - shift) ** 2).sum())
    return RefitOutcome(weights=refit.weights, bias=new_bias,
                        residual_before=residual_before,
                        residual_after=residual_after, damping=refit.damping,
                        normal_residual=float(np.linalg.norm(
                            pmat.T @ (probe.y0 - pred))),
                        weight_norm=float(np.linalg.norm(wmat)),
                        rhs_scale=float(np.linalg.norm(pmat.T @ probe.y0)))


# ---------------------------------------------------------------------------
# Whole-model pipeline
# ---------------------------------------------------------------------------

@dataclass
class PruneTrace:
    """One line of the pruning log: what was kept at one conv layer and why."""

    layer_index: int
    conv_ordinal: int
    variant: str
    budget: int
    lambda_final: float | None
    support: tuple[int, ...]
    residual_before: float
    residual_after: float
    damping: float
    exhaustive_locations: bool = False
    budget_warning: bool = False
    normal_residual: float = 0.0
    weight_norm: float = 0.0
    rhs_scale: float = 0.0


def _rewrite(ckpt: model_io.Checkpoint, prev_index: int, layer_index: int,
             support: np.ndarray, new_weights: np.ndarray,
             new_bias: np.ndarray) -> model_io.Checkpoint:
    """Drop unselected channels: producers at prev conv, consumers at layer l."""
    layers = list(ckpt.spec.layers)
    kept = len(support)
    layers[prev_index] = replace(layers[prev_index], out_channels=kept)
    layers[layer_index] = replace(layers[layer_index], in_channels=kept)
    spec = nn.NetworkSpec(tuple(layers), ckpt.spec.input_dims, ckpt.spec.num_classes)
    params = [p.copy() if p is not None else None for p in ckpt.params]
    prev = ckpt.params[prev_index]
    params[prev_index] = nn.LayerParams(prev.weights[support].copy(),
                                        prev.bias[support].copy())
    params[layer_index] = nn.LayerParams(np.ascontiguousarray(new_weights),
                                         np.ascontiguousarray(new_bias))
    return model_io.Checkpoint(spec, params, dict(ckpt.metadata))


def _check_conv_chain(spec: nn.NetworkSpec) -> None:
    convs = spec.conv_indices()
    for a, b in zip(convs, convs[1:]):
        between = {spec.layers[i].kind for i in range(a + 1, b)}
        if not between <= {nn.RELU, nn.MAXPOOL2D}:
            raise ValueError("only relu/maxpool may sit between prunable convs")


def resolve_budgets(spec: nn.NetworkSpec, config: PruneConfig) -> dict[int, int]:
    """Per-conv keep counts, either as given or resolved from a FLOPs target.

    A FLOPs target picks the uniform keep fraction (rounded up per layer)
    whose resulting compression ratio is closest to the target; ties prefer
    keeping more channels.
    """
    convs = spec.conv_indices()
    if config.budgets is not None:
        config.validate_for(spec)
        return dict(config.budgets)
    if config.flops_target is None:
        return {}
    if config.flops_target < 1.0:
        raise ValueError(f"flops_target must be >= 1, got {config.flops_target}")

    from .harness import flops_count  # deferred: harness wraps this module

    widths = {o: spec.layers[convs[o - 1]].in_channels
              for o in range(2, len(convs) + 1)}
    if not widths:
        return {}
    base_total = flops_count(spec).total

    def budgets_for(fraction: float) -> dict[int, int]:
        return {o: min(c, max(1, int(np.ceil(fraction * c - 1e-9))))
                for o, c in widths.items()}

    fractions = sorted({b / c for c in widths.values() for b in range(1, c + 1)})
    best, best_gap = None, np.inf
    for f in fractions:
        budgets = budgets_for(f)
        pruned = apply_budgets_to_spec(spec, budgets)
        cr = base_total / flops_count(pruned).total
        gap = abs(cr - config.flops_target)
        if gap < best_gap - 1e-15 or best is None:
            best, best_gap = budgets, gap
    return best


def apply_budgets_to_spec(spec: nn.NetworkSpec, budgets: dict[int, int]) -> nn.NetworkSpec:
    """The spec shape a pruning run with these budgets will produce."""
    convs = spec.conv_indices()
    layers = list(spec.layers)
    for ordinal, b in sorted(budgets.items()):
        li, prev = convs[ordinal - 1], convs[ordinal - 2]
        layers[prev] = replace(layers[prev], out_channels=b)
        layers[li] = replace(layers[li], in_channels=b)
    return nn.NetworkSpec(tuple(layers), spec.input_dims, spec.num_classes)


def apply_supports(ckpt: model_io.Checkpoint,
                   supports: dict[int, tuple[int, ...]]) -> model_io.Checkpoint:
    """Structurally prune `ckpt` to the given supports without any refitting.

    Equivalent to zeroing the dropped channels of the original weights; used
    as the selection-only comparator.
    """
    out = ckpt.copy()
    convs = ckpt.spec.conv_indices()
    for ordinal, support in sorted(supports.items()):
        li, prev = convs[ordinal - 1], convs[ordinal - 2]
        sup = np.asarray(sorted(support), dtype=np.int64)
        w = out.params[li].weights[:, sup]
        out = _rewrite(out, prev, li, sup, w, out.params[li].bias)
    return out


def prune_model(uncompressed: model_io.Checkpoint, dataset: model_io.DatasetHandle,
                config: PruneConfig):
    """Run the full layer-by-layer pipeline; returns (compressed, traces).

    Convs are visited shallow to deep, skipping the first; after each stage
    the model is the pruned prefix, the freshly refit layer, and the
    untouched suffix.  Any stage failure raises with the traces so far
    attached to the exception.
    """
    _check_conv_chain(uncompressed.spec)
    config.validate_for(uncompressed.spec)
    budgets = resolve_budgets(uncompressed.spec, config)
    convs = uncompressed.spec.conv_indices()
    compressed = uncompressed.copy()
    traces: list[PruneTrace] = []
    for ordinal in range(2, len(convs) + 1):
        budget = budgets.get(ordinal)
        if budget is None:
            continue
        li, prev = convs[ordinal - 1], convs[ordinal - 2]
        try:
            probe = extract_probes(uncompressed, compressed, li, dataset, config)
            cur = compressed.params[li]
            if config.variant == VARIANT_MAGNITUDE:
                support = magnitude_select(cur.weights, budget)
                lam, warn = None, False
            else:
                system = build_weighted_system(probe, config.variant, config.gamma)
                sel = select_channels(system, budget, config)
                support, lam, warn = sel.support, sel.lambda_final, sel.budget_warning
            refit = refit_layer(probe, support, cur.bias, damping=config.damping)
            sup = np.asarray(support, dtype=np.int64)
            compressed = _rewrite(compressed, prev, li, sup, refit.weights, refit.bias)
            traces.append(PruneTrace(
                layer_index=li, conv_ordinal=ordinal, variant=config.variant,
                budget=budget, lambda_final=lam, support=tuple(support),
                residual_before=refit.residual_before,
                residual_after=refit.residual_after, damping=refit.damping,
                exhaustive_locations=probe.exhaustive, budget_warning=warn,
                normal_residual=refit.normal_residual,
                weight_norm=refit.weight_norm, rhs_scale=refit.rhs_scale))
        except Exception as exc:
            exc.prune_traces = traces
            raise
    return compressed, traces


# ---------------------------------------------------------------------------
# Trace files: line-delimited tabular text
# ---------------------------------------------------------------------------

_TRACE_COLUMNS = ("layer", "conv", "variant", "budget", "lambda", "kept",
                  "support", "residual_before", "residual_after", "damping",
                  "exhaustive", "warning", "normal_residual", "weight_norm",
                  "rhs_scale")


def _fmt_float(x: float | None) -> str:
    return "-" if x is None else repr(float(x))


def write_traces(path, traces: list[PruneTrace]) -> None:
    lines = ["\t".join(_TRACE_COLUMNS)]
    for t in traces:
        lines.append("\t".join((
            str(t.layer_index), str(t.conv_ordinal), t.variant, str(t.budget),
            _fmt_float(t.lambda_final), str(len(t.support)),
            ",".join(str(j) for j in t.support) or "-",
            _fmt_float(t.residual_before), _fmt_float(t.residual_after),
            _fmt_float(t.damping), str(int(t.exhaustive_locations)),
            str(int(t.budget_warning)), _fmt_float(t.normal_residual),
            _fmt_float(t.weight_norm), _fmt_float(t.rhs_scale))))
    Path(path).write_text("\n".join(lines) + "\n")


def read_traces(path) -> list[PruneTrace]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != _TRACE_COLUMNS:
        raise model_io.FormatError(f"{path}: missing trace header")
    out = []
    for line in lines[1:]:
        f = line.split("\t")
        if len(f) != len(_TRACE_COLUMNS):
            raise model_io.FormatError(f"{path}: expected {len(_TRACE_COLUMNS)} "
                                       f"columns, got {len(f)}")
        out.append(PruneTrace(
            layer_index=int(f[0]), conv_ordinal=int(f[1]), variant=f[2],
            budget=int(f[3]), lambda_final=None if f[4] == "-" else float(f[4]),
            support=tuple() if f[6] == "-" else tuple(int(s) for s in f[6].split(",")),
            residual_before=float(f[7]), residual_after=float(f[8]),
            damping=float(f[9]), exhaustive_locations=bool(int(f[10])),
            budget_warning=bool(int(f[11])), normal_residual=float(f[12]),
            weight_norm=float(f[13]), rhs_scale=float(f[14])))
    return out
