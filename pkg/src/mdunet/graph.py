"""Computation-graph construction for the U-Net family and its dense variants.

A model is an explicit DAG of primitive-op nodes (``GraphNode``) held in
topological order by a ``ModelGraph``. Builders produce the classic U-shape
(``build_unet``) and graft multi-scale dense connections onto it
(``add_dense_encoder`` / ``add_dense_cross`` / ``add_dense_decoder``,
composed by ``build_mdunet``).

Resolution levels are 1-indexed: level 1 is full resolution, each deeper
level halves both spatial extents and doubles the channel width.

Dense fusion keeps the parameter overhead small by first squeezing the
concatenated multi-scale sources to a narrow width with a 1x1 conv, then
projecting back to the main path's width with a second 1x1 conv whose output
is added to the main path. Rescaling between levels is parameter-free
(max pooling down, nearest-neighbor up).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class GraphError(ValueError):
    """Raised for invalid configurations or malformed graphs."""


CROSS_MODES = ("skip", "upper", "lower", "cross3", "cross5")
UPSAMPLE_MODES = ("transposed_conv2", "nearest_up2")

#: encoder input is a single grayscale channel throughout the toolkit
IN_CHANNELS = 1


@dataclass(frozen=True)
class ArchConfig:
    """Declarative description of one architecture variant.

    ``enc_dense`` / ``dec_dense`` take a dense degree 0..depth-1 or the
    special strings "min" / "mout".
    """

    depth: int = 5
    base_channels: int = 32
    num_classes: int = 2
    enc_dense: int | str = 0
    dec_dense: int | str = 0
    cross_mode: str = "skip"
    upsample_mode: str = "transposed_conv2"

    def __post_init__(self):
        if self.depth < 2:
            raise GraphError("depth must be at least 2")
        if self.base_channels < 1:
            raise GraphError("base_channels must be positive")
        if self.num_classes < 2:
            raise GraphError("num_classes must be at least 2")
        for name, value, special in (
            ("enc_dense", self.enc_dense, "min"),
            ("dec_dense", self.dec_dense, "mout"),
        ):
            if isinstance(value, str):
                if value != special:
                    raise GraphError(f"{name} must be 0..depth-1 or {special!r}")
            elif not (0 <= value <= self.depth - 1):
                raise GraphError(
                    f"{name}={value} out of range 0..{self.depth - 1} for depth {self.depth}"
                )
        if self.cross_mode not in CROSS_MODES:
            raise GraphError(f"cross_mode must be one of {CROSS_MODES}")
        if self.cross_mode == "cross5" and self.depth < 3:
            raise GraphError("cross5 requires depth >= 3")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise GraphError(f"upsample_mode must be one of {UPSAMPLE_MODES}")

    def channels(self, level: int) -> int:
        return self.base_channels * (1 << (level - 1))

    @property
    def fuse_width(self) -> int:
        """Width of the squeezed dense branch (a quarter of the base width).

        This is the knob that keeps every dense family's parameter
        increment well under 1% of the baseline and the fully combined
        variant under 0.5%.
        """
        return max(1, self.base_channels // 4)


@dataclass
class GraphNode:
    id: str
    kind: str
    parents: list[str]
    level: int
    side: str = "io"  # enc | dec | io
    tag: str = "baseline"  # baseline | enc_dense | dec_dense | cross
    attrs: dict = field(default_factory=dict)
    out_channels: int = 0


def node_param_names(node: GraphNode) -> list[str]:
    if node.kind in ("conv", "tconv"):
        names = [f"{node.id}.weight"]
        if node.attrs.get("bias", True):
            names.append(f"{node.id}.bias")
        return names
    if node.kind == "bn":
        return [f"{node.id}.gamma", f"{node.id}.beta"]
    return []


def node_buffer_names(node: GraphNode) -> list[str]:
    if node.kind == "bn":
        return [f"{node.id}.running_mean", f"{node.id}.running_var"]
    return []


class ModelGraph:
    """Topologically ordered node list plus the parameter/buffer registries."""

    def __init__(self, config: ArchConfig, seed: int = 0):
        self.config = config
        self.nodes: list[GraphNode] = []
        self.parameters: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._index: dict[str, int] = {}
        self._rng = np.random.default_rng(seed)
        # decoder-level cross branches, so a later dense-decoder pass can
        # merge into them instead of adding a second projection
        self._cross_branch: dict[int, dict[str, str]] = {}

    # -- structure -----------------------------------------------------

    def node(self, nid: str) -> GraphNode:
        try:
            return self.nodes[self._index[nid]]
        except KeyError:
            raise GraphError(f"unknown node {nid!r}") from None

    def add_node(self, node: GraphNode, before: str | None = None) -> str:
        if node.id in self._index:
            raise GraphError(f"duplicate node id {node.id!r}")
        for p in node.parents:
            if p not in self._index:
                raise GraphError(f"node {node.id!r} references unknown parent {p!r}")
        if before is None:
            self.nodes.append(node)
        else:
            self.nodes.insert(self._index[before], node)
        self._index = {n.id: i for i, n in enumerate(self.nodes)}
        return node.id

    def consumers(self, nid: str) -> list[GraphNode]:
        return [n for n in self.nodes if nid in n.parents]

    def replace_parent(self, consumer_id: str, old: str, new: str):
        node = self.node(consumer_id)
        node.parents = [new if p == old else p for p in node.parents]

    def validate(self):
        inputs = [n for n in self.nodes if n.kind == "input"]
        outputs = [n for n in self.nodes if n.kind == "output"]
        if len(inputs) != 1 or len(outputs) != 1:
            raise GraphError("graph must have exactly one input and one output node")
        seen: set[str] = set()
        for n in self.nodes:
            for p in n.parents:
                if p not in seen:
                    raise GraphError(f"node {n.id!r} precedes its parent {p!r}")
            seen.add(n.id)
        expected: dict[str, str] = {}
        for n in self.nodes:
            for name in node_param_names(n):
                if name in expected:
                    raise GraphError(f"parameter {name!r} referenced twice")
                expected[name] = n.id
        if set(expected) != set(self.parameters):
            missing = set(expected) ^ set(self.parameters)
            raise GraphError(f"parameter registry out of sync: {sorted(missing)}")

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes if n.kind == "input")

    @property
    def output_id(self) -> str:
        return next(n.id for n in self.nodes if n.kind == "output")

    # -- parameter initialization ---------------------------------------

    def _register_conv(self, nid: str, c_in: int, c_out: int, k: int, bias=True):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = self._rng.uniform(-bound, bound, (c_out, c_in, k, k)).astype(np.float32)
        self.parameters[f"{nid}.weight"] = Parameter(f"{nid}.weight", w)
        if bias:
            self.parameters[f"{nid}.bias"] = Parameter(
                f"{nid}.bias", np.zeros(c_out, dtype=np.float32)
            )

    def _register_tconv(self, nid: str, c_in: int, c_out: int):
        fan_in, fan_out = c_in * 4, c_out * 4
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = self._rng.uniform(-bound, bound, (c_in, c_out, 2, 2)).astype(np.float32)
        self.parameters[f"{nid}.weight"] = Parameter(f"{nid}.weight", w)
        self.parameters[f"{nid}.bias"] = Parameter(
            f"{nid}.bias", np.zeros(c_out, dtype=np.float32)
        )

    def _register_bn(self, nid: str, c: int):
        self.parameters[f"{nid}.gamma"] = Parameter(
            f"{nid}.gamma", np.ones(c, dtype=np.float32)
        )
        self.parameters[f"{nid}.beta"] = Parameter(
            f"{nid}.beta", np.zeros(c, dtype=np.float32)
        )
        self.buffers[f"{nid}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[f"{nid}.running_var"] = np.ones(c, dtype=np.float32)


# ---------------------------------------------------------------------------
# low-level builder helpers


def _add_conv(graph, nid, parent, c_in, c_out, *, k, level, side, tag, bias=True, before=None):
    pad = 1 if k == 3 else 0
    graph._register_conv(nid, c_in, c_out, k, bias)
    graph.add_node(
        GraphNode(
            nid, "conv", [parent], level, side, tag,
            {"kernel": k, "stride": 1, "padding": pad, "bias": bias},
            c_out,
        ),
        before=before,
    )
    return nid


def _add_bn_relu(graph, prefix, parent, c, *, level, side, tag, before=None):
    graph._register_bn(f"{prefix}_bn", c)
    graph.add_node(
        GraphNode(f"{prefix}_bn", "bn", [parent], level, side, tag,
                  {"momentum": 0.9, "eps": 1e-5}, c),
        before=before,
    )
    graph.add_node(
        GraphNode(f"{prefix}_relu", "relu", [f"{prefix}_bn"], level, side, tag, {}, c),
        before=before,
    )
    return f"{prefix}_relu"


def _conv_block(graph, prefix, parent, c_in, c_out, *, level, side):
    """Two cascaded [conv3x3, BN, ReLU] stages."""
    cur = parent
    for j, ci in ((1, c_in), (2, c_out)):
        _add_conv(graph, f"{prefix}_conv{j}", cur, ci, c_out,
                  k=3, level=level, side=side, tag="baseline")
        graph._register_bn(f"{prefix}_bn{j}", c_out)
        graph.add_node(GraphNode(f"{prefix}_bn{j}", "bn", [f"{prefix}_conv{j}"],
                                 level, side, "baseline",
                                 {"momentum": 0.9, "eps": 1e-5}, c_out))
        graph.add_node(GraphNode(f"{prefix}_relu{j}", "relu", [f"{prefix}_bn{j}"],
                                 level, side, "baseline", {}, c_out))
        cur = f"{prefix}_relu{j}"
    return cur


# ---------------------------------------------------------------------------
# fusion primitives


def rescale_to_level(graph, source_id, target_level, *, prefix, tag, before=None):
    """Insert parameter-free resampling taking ``source_id`` to ``target_level``.

    Pools when the target is deeper, nearest-upsamples when shallower,
    returns the source unchanged when the levels match.
    """
    src = graph.node(source_id)
    j = src.level
    if not (1 <= target_level <= graph.config.depth):
        raise GraphError(f"target level {target_level} out of range")
    if j == target_level:
        return source_id
    kind, times = ("maxpool", target_level - j) if target_level > j else ("upnearest", j - target_level)
    nid = f"{prefix}_rescale"
    graph.add_node(
        GraphNode(nid, kind, [source_id], target_level, src.side, tag,
                  {"times": times}, src.out_channels),
        before=before,
    )
    return nid


def fuse_H(graph, sources, target_channels, *, prefix, tag, before=None):
    """Concatenate ``sources`` and map them to ``target_channels``.

    Appends channel concatenation (skipped for a single source) followed by
    a 1x1 conv, BN and ReLU. Returns the id of the fused output node.
    """
    if not sources:
        raise GraphError("fuse_H needs at least one source")
    nodes = [graph.node(s) for s in sources]
    levels = {n.level for n in nodes}
    if len(levels) != 1:
        raise GraphError(f"fuse_H sources sit at mismatched levels {sorted(levels)}")
    level = levels.pop()
    side = nodes[0].side
    total_c = sum(n.out_channels for n in nodes)
    cur = sources[0]
    if len(sources) > 1:
        cur = graph.add_node(
            GraphNode(f"{prefix}_cat", "concat", list(sources), level, side, tag, {}, total_c),
            before=before,
        )
    _add_conv(graph, f"{prefix}_fuse", cur, total_c, target_channels,
              k=1, level=level, side=side, tag=tag, before=before)
    return _add_bn_relu(graph, f"{prefix}_fuse", f"{prefix}_fuse", target_channels,
                        level=level, side=side, tag=tag, before=before)


def _inject(graph, branch_id, inject_id, consumers, *, prefix, tag, before):
    """Project a fused dense branch onto the main path and add it in place.

    ``consumers`` are the pre-existing consumers of ``inject_id``, captured
    before the branch was built (the branch itself may source the inject
    node); they are rewired onto the add node. The projection restores the
    main path's channel count, so everything downstream keeps its width.
    """
    target = graph.node(inject_id)
    proj = fuse_H(graph, [branch_id], target.out_channels,
                  prefix=f"{prefix}_proj", tag=tag, before=before)
    add_id = graph.add_node(
        GraphNode(f"{prefix}_add", "add", [inject_id, proj], target.level,
                  target.side, tag, {}, target.out_channels),
        before=before,
    )
    for cid in consumers:
        graph.replace_parent(cid, inject_id, add_id)
    return add_id


# ---------------------------------------------------------------------------
# baseline builder


def _build_baseline(config: ArchConfig, seed: int) -> ModelGraph:
    g = ModelGraph(config, seed)
    d = config.depth
    g.add_node(GraphNode("input", "input", [], 1, "io", "baseline", {}, IN_CHANNELS))

    enc_out: dict[int, str] = {}
    cur = "input"
    for i in range(1, d + 1):
        c = config.channels(i)
        if i > 1:
            cur = g.add_node(
                GraphNode(f"pool{i - 1}", "maxpool", [cur], i, "enc", "baseline",
                          {"times": 1}, config.channels(i - 1))
            )
        c_in = IN_CHANNELS if i == 1 else config.channels(i - 1)
        cur = _conv_block(g, f"enc{i}", cur, c_in, c, level=i, side="enc")
        enc_out[i] = cur

    for level in range(d - 1, 0, -1):
        c = config.channels(level)
        c_up_in = config.channels(level + 1)
        if config.upsample_mode == "transposed_conv2":
            g._register_tconv(f"dec{level}_up", c_up_in, c)
            g.add_node(GraphNode(f"dec{level}_up", "tconv", [cur], level, "dec",
                                 "baseline", {"bias": True}, c))
            c_up = c
        else:
            g.add_node(GraphNode(f"dec{level}_up", "upnearest", [cur], level, "dec",
                                 "baseline", {"times": 1}, c_up_in))
            c_up = c_up_in
        g.add_node(GraphNode(f"dec{level}_cat", "concat",
                             [enc_out[level], f"dec{level}_up"], level, "dec",
                             "baseline", {}, c + c_up))
        cur = _conv_block(g, f"dec{level}", f"dec{level}_cat", c + c_up, c,
                          level=level, side="dec")

    _add_conv(g, "head", cur, config.channels(1), config.num_classes,
              k=1, level=1, side="dec", tag="baseline")
    g.add_node(GraphNode("output", "output", ["head"], 1, "io", "baseline", {},
                         config.num_classes))
    return g


def build_unet(config: ArchConfig, seed: int = 0) -> ModelGraph:
    """Build the classic U-shape; the config must carry no dense connections."""
    if config.enc_dense != 0 or config.dec_dense != 0 or config.cross_mode != "skip":
        raise GraphError("build_unet requires enc_dense=0, dec_dense=0, cross_mode='skip'")
    g = _build_baseline(config, seed)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# dense transforms


def _dense_site(graph, sources, fuse_level, inject_id, *, prefix, tag, bridge=None):
    """Assemble one dense fusion site.

    ``sources`` are rescaled to ``fuse_level``, squeezed to the fusion width,
    optionally bridged one level (to meet the main path's resolution), then
    projected and added onto ``inject_id``.
    """
    consumer_ids = [n.id for n in graph.consumers(inject_id)]
    before = min(consumer_ids, key=lambda cid: graph._index[cid])
    g_width = graph.config.fuse_width
    rescaled = [
        rescale_to_level(graph, s, fuse_level, prefix=f"{prefix}_src{k}", tag=tag, before=before)
        for k, s in enumerate(sources)
    ]
    branch = fuse_H(graph, rescaled, g_width, prefix=prefix, tag=tag, before=before)
    if bridge == "pool":
        branch = graph.add_node(
            GraphNode(f"{prefix}_bridge", "maxpool", [branch], fuse_level + 1,
                      graph.node(branch).side, tag, {"times": 1}, g_width),
            before=before,
        )
    elif bridge == "up":
        branch = graph.add_node(
            GraphNode(f"{prefix}_bridge", "upnearest", [branch], fuse_level - 1,
                      graph.node(branch).side, tag, {"times": 1}, g_width),
            before=before,
        )
    add_id = _inject(graph, branch, inject_id, consumer_ids,
                     prefix=prefix, tag=tag, before=before)
    return add_id, branch


def add_dense_encoder(graph: ModelGraph, degree) -> ModelGraph:
    """Fuse earlier encoder outputs into each level's pooled input.

    Numeric degree n sources block outputs of levels max(1, i-1-n)..i-2 at
    each level i; "min" sources the rescaled network input instead. Levels
    with no admissible source are left unmodified.
    """
    if degree == 0:
        return graph
    d = graph.config.depth
    if degree != "min" and not (1 <= degree <= d - 1):
        raise GraphError(f"dense degree {degree} exceeds depth-1={d - 1}")
    for i in range(2, d + 1):
        if degree == "min":
            sources = ["input"]
        else:
            lo = max(1, i - 1 - degree)
            sources = [f"enc{j}_relu2" for j in range(lo, i - 1)]
            if not sources:
                continue
        _dense_site(graph, sources, i - 1, f"pool{i - 1}",
                    prefix=f"enc{i}_dense", tag="enc_dense", bridge="pool")
    graph.validate()
    return graph


def cross_source_levels(mode: str, level: int, depth: int) -> list[int]:
    """Encoder levels fused at a decoder level, clamped to [1, depth-1]."""
    k = 1 if mode == "cross3" else 2
    if mode == "upper":
        lo, hi = level, level + k
    elif mode == "lower":
        lo, hi = level - k, level
    else:
        lo, hi = level - k, level + k
    return [j for j in range(max(1, lo), min(depth - 1, hi) + 1)]


def add_dense_cross(graph: ModelGraph, mode: str) -> ModelGraph:
    """Replace each skip with a multi-scale fusion of nearby encoder levels.

    The fused branch is injected into the upsampled decoder path; the direct
    same-level skip concat of the baseline stays in place.
    """
    if mode == "skip":
        return graph
    if mode not in CROSS_MODES:
        raise GraphError(f"unknown cross mode {mode!r}")
    d = graph.config.depth
    for level in range(d - 1, 0, -1):
        sources = [f"enc{j}_relu2" for j in cross_source_levels(mode, level, d)]
        add_id, branch = _dense_site(graph, sources, level, f"dec{level}_up",
                                     prefix=f"dec{level}_cross", tag="cross")
        graph._cross_branch[level] = {
            "branch": branch,
            "proj_conv": f"dec{level}_cross_proj_fuse",
        }
    graph.validate()
    return graph


def add_dense_decoder(graph: ModelGraph, degree) -> ModelGraph:
    """Fuse earlier decoder outputs into each level's upsampled input.

    Mirrors ``add_dense_encoder`` across the U: numeric degree n at decoder
    step t sources the outputs of steps max(1, t-1-n)..t-2; "mout" fuses
    every decoder output once, at full resolution, into the final feature
    map. When a cross branch already exists at a site, the decoder branch is
    merged into it ahead of the shared projection instead of adding a second
    one.
    """
    if degree == 0:
        return graph
    d = graph.config.depth
    if degree != "mout" and not (1 <= degree <= d - 1):
        raise GraphError(f"dense degree {degree} exceeds depth-1={d - 1}")

    if degree == "mout":
        sources = [f"dec{d - s}_relu2" for s in range(1, d)]
        _dense_site(graph, sources, 1, "dec1_relu2", prefix="out_dense", tag="dec_dense")
        graph.validate()
        return graph

    for t in range(3, d):
        level = d - t
        lo = max(1, t - 1 - degree)
        sources = [f"dec{d - s}_relu2" for s in range(lo, t - 1)]
        if not sources:
            continue
        existing = graph._cross_branch.get(level)
        if existing is None:
            _dense_site(graph, sources, level + 1, f"dec{level}_up",
                        prefix=f"dec{level}_dense", tag="dec_dense", bridge="up")
            continue
        # merge with the cross branch: fuse both narrow branches, then feed
        # the site's existing projection from the merged result
        proj_conv = existing["proj_conv"]
        prefix = f"dec{level}_dense"
        g_width = graph.config.fuse_width
        rescaled = [
            rescale_to_level(graph, s, level + 1, prefix=f"{prefix}_src{k}",
                             tag="dec_dense", before=proj_conv)
            for k, s in enumerate(sources)
        ]
        branch = fuse_H(graph, rescaled, g_width, prefix=prefix, tag="dec_dense",
                        before=proj_conv)
        branch = graph.add_node(
            GraphNode(f"{prefix}_bridge", "upnearest", [branch], level, "dec",
                      "dec_dense", {"times": 1}, g_width),
            before=proj_conv,
        )
        merged = fuse_H(graph, [existing["branch"], branch], g_width,
                        prefix=f"dec{level}_merge", tag="dec_dense", before=proj_conv)
        graph.replace_parent(proj_conv, existing["branch"], merged)
    graph.validate()
    return graph


def build_mdunet(config: ArchConfig, seed: int = 0) -> ModelGraph:
    """Build the configured variant: baseline plus encoder, cross and decoder
    dense connections, applied in that order."""
    g = _build_baseline(config, seed)
    add_dense_encoder(g, config.enc_dense)
    add_dense_cross(g, config.cross_mode)
    add_dense_decoder(g, config.dec_dense)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# static analysis


def shape_infer(graph: ModelGraph, input_shape) -> dict[str, tuple[int, int, int, int]]:
    """Propagate shapes through the graph; raises on any inconsistency."""
    n, c, h, w = input_shape
    d = graph.config.depth
    div = 1 << (d - 1)
    if c != IN_CHANNELS:
        raise GraphError(f"input must have {IN_CHANNELS} channel(s), got {c}")
    if h % div or w % div or h < div or w < div:
        raise GraphError(f"input extents {h}x{w} must be positive multiples of {div}")

    shapes: dict[str, tuple[int, int, int, int]] = {}
    for node in graph.nodes:
        ps = [shapes[p] for p in node.parents]
        if node.kind == "input":
            out = (n, c, h, w)
        elif node.kind == "conv":
            wshape = graph.parameters[f"{node.id}.weight"].values.shape
            nn, cc, hh, ww = ps[0]
            if wshape[1] != cc:
                raise GraphError(f"{node.id}: expects {wshape[1]} channels, got {cc}")
            k, s, p = node.attrs["kernel"], node.attrs["stride"], node.attrs["padding"]
            out = (nn, wshape[0], (hh + 2 * p - k) // s + 1, (ww + 2 * p - k) // s + 1)
        elif node.kind == "tconv":
            wshape = graph.parameters[f"{node.id}.weight"].values.shape
            nn, cc, hh, ww = ps[0]
            if wshape[0] != cc:
                raise GraphError(f"{node.id}: expects {wshape[0]} channels, got {cc}")
            out = (nn, wshape[1], 2 * hh, 2 * ww)
        elif node.kind in ("bn", "relu", "output"):
            out = ps[0]
        elif node.kind == "maxpool":
            nn, cc, hh, ww = ps[0]
            f = 1 << node.attrs["times"]
            if hh % f or ww % f:
                raise GraphError(f"{node.id}: extent {hh}x{ww} not divisible by {f}")
            out = (nn, cc, hh // f, ww // f)
        elif node.kind == "upnearest":
            nn, cc, hh, ww = ps[0]
            f = 1 << node.attrs["times"]
            out = (nn, cc, hh * f, ww * f)
        elif node.kind == "concat":
            nn, _, hh, ww = ps[0]
            for q in ps[1:]:
                if q[0] != nn or q[2:] != (hh, ww):
                    raise GraphError(f"{node.id}: concat inputs disagree: {ps}")
            out = (nn, sum(q[1] for q in ps), hh, ww)
        elif node.kind == "add":
            if ps[0] != ps[1]:
                raise GraphError(f"{node.id}: add inputs disagree: {ps[0]} vs {ps[1]}")
            out = ps[0]
        else:
            raise GraphError(f"{node.id}: unknown kind {node.kind!r}")
        if node.kind not in ("input", "output") and out[1] != node.out_channels:
            raise GraphError(
                f"{node.id}: inferred {out[1]} channels, node declares {node.out_channels}"
            )
        shapes[node.id] = out

    out_shape = shapes[graph.output_id]
    expected = (n, graph.config.num_classes, h, w)
    if out_shape != expected:
        raise GraphError(f"output shape {out_shape} != expected {expected}")
    return shapes


def param_count(graph: ModelGraph) -> dict[str, int]:
    """Exact parameter totals, attributed to the family that created them."""
    counts = {"total": 0, "baseline": 0, "enc_dense": 0, "dec_dense": 0, "cross": 0}
    for node in graph.nodes:
        for name in node_param_names(node):
            size = graph.parameters[name].size
            counts["total"] += size
            counts[node.tag] += size
    return counts


def export_dot(graph: ModelGraph) -> str:
    """Render the graph as a DOT digraph with op kind, level and shape labels."""
    d = graph.config.depth
    s = 1 << (d - 1)
    shapes = shape_infer(graph, (1, IN_CHANNELS, s, s))
    lines = ["digraph model {"]
    for node in graph.nodes:
        shape = "x".join(str(v) for v in shapes[node.id])
        lines.append(f'  "{node.id}" [label="{node.id}\\n{node.kind} L{node.level}\\n{shape}"];')
    for node in graph.nodes:
        for p in node.parents:
            lines.append(f'  "{p}" -> "{node.id}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# execution


def run_forward(graph: ModelGraph, x: np.ndarray, mode: str = "infer",
                params: dict[str, np.ndarray] | None = None,
                buffers: dict[str, np.ndarray] | None = None,
                tape: list | None = None) -> np.ndarray:
    """Evaluate the graph on a raw array.

    ``params``/``buffers`` default to the graph's own registries; train mode
    updates the (possibly overridden) buffer dict with fresh BN statistics.
    Pass a list as ``tape`` to capture what ``run_backward`` needs.
    """
    if mode not in ("train", "infer"):
        raise GraphError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    if params is None:
        params = {k: p.values for k, p in graph.parameters.items()}
    if buffers is None:
        buffers = graph.buffers

    outs: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        ps = [outs[p] for p in node.parents]
        ctx = None
        if node.kind == "input":
            y = x
        elif node.kind == "conv":
            w = params[f"{node.id}.weight"]
            b = params.get(f"{node.id}.bias") if node.attrs.get("bias", True) else None
            y, ctx = ops.conv2d_forward(ps[0], w, b, node.attrs["stride"], node.attrs["padding"])
        elif node.kind == "tconv":
            w = params[f"{node.id}.weight"]
            b = params.get(f"{node.id}.bias") if node.attrs.get("bias", True) else None
            y, ctx = ops.transposed_conv2_forward(ps[0], w, b)
        elif node.kind == "bn":
            y, ctx, rm, rv = ops.batch_norm_forward(
                ps[0], params[f"{node.id}.gamma"], params[f"{node.id}.beta"],
                buffers[f"{node.id}.running_mean"], buffers[f"{node.id}.running_var"],
                train, node.attrs["momentum"], node.attrs["eps"],
            )
            if train:
                buffers[f"{node.id}.running_mean"] = rm
                buffers[f"{node.id}.running_var"] = rv
        elif node.kind == "relu":
            y, ctx = ops.relu_forward(ps[0])
        elif node.kind == "maxpool":
            y, ctx = ops.maxpool2_forward(ps[0], node.attrs["times"])
        elif node.kind == "upnearest":
            y, ctx = ops.nearest_up2_forward(ps[0], node.attrs["times"])
        elif node.kind == "concat":
            y, ctx = ops.concat_channels_forward(ps)
        elif node.kind == "add":
            y, ctx = ops.add_forward(ps[0], ps[1])
        elif node.kind == "output":
            y = ps[0]
        else:
            raise GraphError(f"cannot execute node kind {node.kind!r}")
        outs[node.id] = y
        if tape is not None:
            tape.append((node, ctx))
    return outs[graph.output_id]


def run_backward(graph: ModelGraph, tape: list, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate through a taped forward pass; returns parameter grads."""
    grads: dict[str, np.ndarray] = {graph.output_id: grad_out}
    pgrads: dict[str, np.ndarray] = {}

    def feed(nid, g):
        if nid in grads:
            grads[nid] = grads[nid] + g
        else:
            grads[nid] = g

    def feed_param(name, g):
        if name in pgrads:
            pgrads[name] += g
        else:
            pgrads[name] = g

    for node, ctx in reversed(tape):
        g = grads.pop(node.id, None)
        if g is None or node.kind == "input":
            continue
        if node.kind == "output":
            feed(node.parents[0], g)
        elif node.kind == "conv":
            gx, gw, gb = ops.conv2d_backward(ctx, g)
            feed(node.parents[0], gx)
            feed_param(f"{node.id}.weight", gw)
            if gb is not None:
                feed_param(f"{node.id}.bias", gb)
        elif node.kind == "tconv":
            gx, gw, gb = ops.transposed_conv2_backward(ctx, g)
            feed(node.parents[0], gx)
            feed_param(f"{node.id}.weight", gw)
            if gb is not None:
                feed_param(f"{node.id}.bias", gb)
        elif node.kind == "bn":
            gx, dgamma, dbeta = ops.batch_norm_backward(ctx, g)
            feed(node.parents[0], gx)
            feed_param(f"{node.id}.gamma", dgamma)
            feed_param(f"{node.id}.beta", dbeta)
        elif node.kind == "relu":
            feed(node.parents[0], ops.relu_backward(ctx, g))
        elif node.kind == "maxpool":
            feed(node.parents[0], ops.maxpool2_backward(ctx, g))
        elif node.kind == "upnearest":
            feed(node.parents[0], ops.nearest_up2_backward(ctx, g))
        elif node.kind == "concat":
            for p, gp in zip(node.parents, ops.concat_channels_backward(ctx, g)):
                feed(p, gp)
        elif node.kind == "add":
            feed(node.parents[0], g)
            feed(node.parents[1], g)
        else:
            raise GraphError(f"cannot backprop node kind {node.kind!r}")
    return pgrads


def forward(graph: ModelGraph, x, mode: str = "infer") -> Tensor:
    """Tensor-level entry point used by callers outside the training loop."""
    arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    shape_infer(graph, arr.shape)
    return Tensor(run_forward(graph, arr, mode))
