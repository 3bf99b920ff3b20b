"""Architecture cost accounting: MACs, BitOps, parameters, table latency.

Costs are pure geometry.  An architecture is lowered to a list of conv
descriptions (ConvGeom) and every metric is a sum over those rows, so the
numbers never depend on weights or training state.  Latency is different:
it comes from a lookup table, either measured on this machine with
``measure_latency_table`` or loaded from JSON.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np

from .errors import ArchitectureError, ConfigError, LatencyTableError
from .space.blocks import VARIANT_KERNEL, ConvBnUnit, ForwardContext, ShuffleUnit
from .space.spec import (
    Architecture,
    Gene,
    SupernetSpec,
    validate_architecture,
)

CONSTRAINT_METRICS = ("macs", "bitops", "latency_ms", "params")


@dataclass(frozen=True)
class ConvGeom:
    """One convolution (or the final linear layer) as pure geometry.

    ``bits`` is a (weight_bits, act_bits) pair for fake-quantized convs and
    None for full-precision ones; only quantized rows contribute BitOps.
    """

    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    groups: int
    out_h: int
    out_w: int
    bits: Optional[tuple[int, int]] = None
    bn: bool = True
    bias: bool = False
    alpha: bool = False

    def macs(self) -> int:
        return self.cout * (self.cin // self.groups) * self.kernel ** 2 \
            * self.out_h * self.out_w

    def params(self) -> int:
        n = self.cout * (self.cin // self.groups) * self.kernel ** 2
        if self.bn:
            n += 2 * self.cout
        if self.bias:
            n += self.cout
        if self.alpha:
            n += 1
        return n

    def bitops(self) -> int:
        if self.bits is None:
            return 0
        w_bits, a_bits = self.bits
        return self.macs() * w_bits * a_bits


def _out_size(size: int, kernel: int, stride: int) -> int:
    # padding is always kernel // 2 in this network family
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def _gene_text(gene: Gene) -> str:
    v, c, q = gene
    return f"{v}.{c}.{q}"


def lower_architecture(arch: Architecture, spec: SupernetSpec) -> list[ConvGeom]:
    """Expand an architecture into per-conv geometry rows, stem to classifier."""
    validate_architecture(spec, arch)
    rows: list[ConvGeom] = []
    size = _out_size(spec.input_size, 3, spec.stem_stride)
    rows.append(ConvGeom("stem", spec.input_channels, spec.stem_channels,
                         3, spec.stem_stride, 1, size, size))

    for i, (blk, gene, (in_ch, out_ch)) in enumerate(
            zip(spec.blocks, arch, spec.block_channels())):
        v, c, q = gene
        variant = blk.variants[v]
        mid = blk.mid_channels(blk.multipliers[c])
        bits = blk.bit_pairs[q] if blk.bit_pairs else None
        quant = blk.quantized
        out_half = out_ch // 2
        branch_in = in_ch if blk.stride == 2 else in_ch // 2
        k = VARIANT_KERNEL[variant]
        osize = _out_size(size, k, blk.stride)
        pre = f"blocks.{i}."

        def pw(name: str, cin: int, cout: int, s: int,
               quantized: bool) -> ConvGeom:
            return ConvGeom(pre + name, cin, cout, 1, 1, 1, s, s,
                            bits=bits if quantized else None,
                            alpha=quant and quantized)

        def dw(name: str, ch: int, kk: int, stride: int, s: int) -> ConvGeom:
            return ConvGeom(pre + name, ch, ch, kk, stride, ch, s, s)

        if variant == "choice_x":
            rows.append(dw("dw0", branch_in, 3, blk.stride, osize))
            rows.append(pw("pw0", branch_in, mid, osize, True))
            rows.append(dw("dw1", mid, 3, 1, osize))
            rows.append(pw("pw1", mid, mid, osize, True))
            rows.append(dw("dw2", mid, 3, 1, osize))
            rows.append(pw("pw2", mid, out_half, osize, True))
        else:
            rows.append(pw("pw0", branch_in, mid, size, True))
            rows.append(dw("dw", mid, k, blk.stride, osize))
            rows.append(pw("pw1", mid, out_half, osize, True))
        if blk.stride == 2:
            rows.append(dw("proj.dw", in_ch, 3, 2, osize))
            rows.append(pw("proj.pw", in_ch, out_half, osize, False))
        size = osize

    last = spec.blocks[-1].base_channels
    rows.append(ConvGeom("head", last, spec.head_channels, 1, 1, 1, size, size))
    rows.append(ConvGeom("classifier", spec.head_channels, spec.num_classes,
                         1, 1, 1, 1, 1, bn=False, bias=True))
    return rows


def count_macs(arch: Architecture, spec: SupernetSpec) -> int:
    """Total multiply-accumulates of the subnet selected by ``arch``."""
    return sum(g.macs() for g in lower_architecture(arch, spec))


def count_params(arch: Architecture, spec: SupernetSpec) -> int:
    """Learnable parameter count (conv kernels, BN affine pairs, clip
    thresholds, classifier weights and bias)."""
    return sum(g.params() for g in lower_architecture(arch, spec))


def count_bitops(arch: Architecture, spec: SupernetSpec) -> int:
    """Total BitOps: MACs x weight_bits x act_bits over quantized convs.

    Full-precision layers (stem, depthwise convs, projection, head,
    classifier) contribute nothing.
    """
    if not all(blk.quantized for blk in spec.blocks):
        raise ArchitectureError(
            "bit-operation count needs quantization genes on every block")
    return sum(g.bitops() for g in lower_architecture(arch, spec))


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class ConstraintSpec:
    """One hard resource bound: metric <= max_value (and >= min_value if set)."""

    metric: str
    max_value: float
    min_value: Optional[float] = None

    def __post_init__(self):
        if self.metric not in CONSTRAINT_METRICS:
            raise ConfigError(
                f"unknown constraint metric {self.metric!r}; "
                f"choose from {CONSTRAINT_METRICS}")
        if not self.max_value > 0:
            raise ConfigError(f"constraint max_value must be positive, "
                              f"got {self.max_value}")
        if self.min_value is not None and not self.min_value < self.max_value:
            raise ConfigError(
                f"constraint min_value {self.min_value} must be below "
                f"max_value {self.max_value}")


def parse_constraint(text: str) -> ConstraintSpec:
    """Parse the command-line form 'METRIC:VALUE', e.g. 'macs:20e6'."""
    metric, sep, value = text.partition(":")
    if not sep or not value:
        raise ConfigError(f"constraint {text!r} is not METRIC:VALUE")
    try:
        bound = float(value)
    except ValueError:
        raise ConfigError(f"constraint bound {value!r} is not a number") from None
    return ConstraintSpec(metric=metric.strip(), max_value=bound)


def metric_value(arch: Architecture, spec: SupernetSpec, metric: str,
                 table: Optional["LatencyTable"] = None) -> float:
    if metric == "macs":
        return float(count_macs(arch, spec))
    if metric == "params":
        return float(count_params(arch, spec))
    if metric == "bitops":
        return float(count_bitops(arch, spec))
    if metric == "latency_ms":
        if table is None:
            raise LatencyTableError(
                "latency_ms constraint requires a latency table")
        return latency_lookup(arch, table)
    raise ConfigError(f"unknown constraint metric {metric!r}")


def satisfies_constraint(arch: Architecture, spec: SupernetSpec,
                         constraints: list[ConstraintSpec],
                         table: Optional["LatencyTable"] = None) -> bool:
    """True iff every constraint holds.  Bounds are inclusive."""
    for c in constraints:
        value = metric_value(arch, spec, c.metric, table)
        if value > c.max_value:
            return False
        if c.min_value is not None and value < c.min_value:
            return False
    return True


# ---------------------------------------------------------------------------
# latency tables


@dataclass(frozen=True)
class LatencyTable:
    """Additive latency model: stem + head + one entry per block gene.

    Block entries are keyed by the gene's text form 'v.c.q'.
    """

    stem_ms: float
    head_ms: float
    blocks: tuple[dict[str, float], ...]

    def __post_init__(self):
        if self.stem_ms < 0 or self.head_ms < 0:
            raise LatencyTableError("stem/head latency must be >= 0")
        for i, entries in enumerate(self.blocks):
            for text, ms in entries.items():
                if ms < 0:
                    raise LatencyTableError(
                        f"block {i} gene {text} has negative latency {ms}")


def latency_lookup(arch: Architecture, table: LatencyTable) -> float:
    """Sum the per-block entries for ``arch`` plus the stem and head costs."""
    if len(arch) != len(table.blocks):
        raise LatencyTableError(
            f"architecture has {len(arch)} blocks, table covers "
            f"{len(table.blocks)}")
    total = table.stem_ms + table.head_ms
    for i, gene in enumerate(arch):
        text = _gene_text(gene)
        try:
            total += table.blocks[i][text]
        except KeyError:
            raise LatencyTableError(
                f"latency table has no entry for block {i} gene {text}"
            ) from None
    return total


def validate_latency_table(table: LatencyTable, spec: SupernetSpec) -> None:
    """Check the table covers every gene of every block of ``spec``."""
    if len(table.blocks) != spec.num_blocks:
        raise LatencyTableError(
            f"table covers {len(table.blocks)} blocks, space has "
            f"{spec.num_blocks}")
    for i, blk in enumerate(spec.blocks):
        nv, nc, nq = blk.gene_sizes
        for gene in product(range(nv), range(nc), range(nq)):
            text = _gene_text(gene)
            if text not in table.blocks[i]:
                raise LatencyTableError(
                    f"latency table misses block {i} gene {text}")


def save_latency_table(table: LatencyTable, path) -> None:
    payload = {"stem": table.stem_ms, "head": table.head_ms,
               "blocks": list(table.blocks)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_latency_table(path) -> LatencyTable:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LatencyTableError(f"latency table {path}: {exc}") from None
    try:
        stem = float(payload["stem"])
        head = float(payload["head"])
        blocks = tuple({str(k): float(v) for k, v in entries.items()}
                       for entries in payload["blocks"])
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise LatencyTableError(
            f"latency table {path} is malformed: {exc!r}") from None
    return LatencyTable(stem_ms=stem, head_ms=head, blocks=blocks)


def table_from_macs(spec: SupernetSpec, ms_per_mac: float = 1e-6) -> LatencyTable:
    """Synthetic table that scales each component's MACs into milliseconds.

    Useful as a deterministic stand-in when no measurement is wanted; total
    lookup differs from count_macs * ms_per_mac only by the classifier term,
    so it ranks architectures exactly as MACs do.
    """
    base = default_gene_arch(spec)
    rows = lower_architecture(base, spec)
    stem_ms = rows[0].macs() * ms_per_mac
    head_ms = next(g for g in rows if g.name == "head").macs() * ms_per_mac
    blocks = []
    for i, blk in enumerate(spec.blocks):
        nv, nc, nq = blk.gene_sizes
        entries = {}
        for gene in product(range(nv), range(nc), range(nq)):
            arch = base[:i] + (gene,) + base[i + 1:]
            prefix = f"blocks.{i}."
            macs = sum(g.macs() for g in lower_architecture(arch, spec)
                       if g.name.startswith(prefix))
            entries[_gene_text(gene)] = macs * ms_per_mac
        blocks.append(entries)
    return LatencyTable(stem_ms=stem_ms, head_ms=head_ms, blocks=tuple(blocks))


def default_gene_arch(spec: SupernetSpec) -> Architecture:
    return tuple((0, 0, 0) for _ in spec.blocks)


def _median_forward_ms(run, repeats: int) -> float:
    run()  # warm the allocator before timing
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(statistics.median(times))


def measure_latency_table(spec: SupernetSpec, batch: int = 32,
                          repeats: int = 20, seed: int = 0) -> LatencyTable:
    """Measure wall-clock latency of every block candidate on this machine.

    Each entry is the median of ``repeats`` inference forwards at the
    candidate's real input shape.  Entries are additive by construction,
    mirroring how the network executes block by block.
    """
    rng = np.random.default_rng(seed)
    ctx = ForwardContext(mode="eval")

    def feed(ch: int, size: int):
        from .engine.tensor import Tensor
        data = rng.normal(0.0, 1.0, (batch, ch, size, size)).astype(np.float32)
        return Tensor(data)

    size = _out_size(spec.input_size, 3, spec.stem_stride)
    stem = ConvBnUnit(rng, "stem", spec.input_channels, spec.stem_channels,
                      3, stride=spec.stem_stride)
    x = feed(spec.input_channels, spec.input_size)
    stem_ms = _median_forward_ms(lambda: stem.forward(ctx, x), repeats)

    blocks = []
    for i, (blk, (in_ch, out_ch)) in enumerate(
            zip(spec.blocks, spec.block_channels())):
        nv, nc, nq = blk.gene_sizes
        entries: dict[str, float] = {}
        xin = feed(in_ch, size)
        for gene in product(range(nv), range(nc), range(nq)):
            v, c, q = gene
            variant = blk.variants[v]
            mid = blk.mid_channels(blk.multipliers[c])
            bits = blk.bit_pairs[q] if blk.bit_pairs else None
            unit = ShuffleUnit(rng, f"blocks.{i}", variant, in_ch, out_ch,
                               blk.stride, mid, blk.quantized)
            entries[_gene_text(gene)] = _median_forward_ms(
                lambda: unit.forward(ctx, xin, mid, bits), repeats)
        blocks.append(entries)
        size = _out_size(size, 3, blk.stride)

    head = ConvBnUnit(rng, "head", spec.blocks[-1].base_channels,
                      spec.head_channels, 1)
    xh = feed(spec.blocks[-1].base_channels, size)
    head_ms = _median_forward_ms(lambda: head.forward(ctx, xh), repeats)
    return LatencyTable(stem_ms=stem_ms, head_ms=head_ms, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# cost reports


@dataclass(frozen=True)
class CostRow:
    name: str
    macs: int
    params: int
    bitops: int
    latency_ms: Optional[float]


@dataclass(frozen=True)
class CostReport:
    """Per-component cost rows plus totals; totals are exact row sums."""

    rows: tuple[CostRow, ...]
    total_macs: int
    total_params: int
    total_bitops: int
    total_latency_ms: Optional[float]


def build_cost_report(arch: Architecture, spec: SupernetSpec,
                      table: Optional[LatencyTable] = None) -> CostReport:
    """Aggregate geometry rows per component (stem, each block, head,
    classifier) and attach table latency when a table is given."""
    geoms = lower_architecture(arch, spec)
    quantized = all(blk.quantized for blk in spec.blocks)
    groups: dict[str, list[ConvGeom]] = {}
    order: list[str] = []
    for g in geoms:
        name = g.name.split(".")[0]
        if name == "blocks":
            name = ".".join(g.name.split(".")[:2])
        if name not in groups:
            groups[name] = []
            order.append(name)
        groups[name].append(g)

    def row_latency(name: str) -> Optional[float]:
        if table is None:
            return None
        if name == "stem":
            return table.stem_ms
        if name == "head":
            return table.head_ms
        if name == "classifier":
            return 0.0
        idx = int(name.split(".")[1])
        return table.blocks[idx][_gene_text(arch[idx])]

    if table is not None:
        # surface coverage problems before building any rows
        latency_lookup(arch, table)

    rows = []
    for name in order:
        gs = groups[name]
        rows.append(CostRow(
            name=name,
            macs=sum(g.macs() for g in gs),
            params=sum(g.params() for g in gs),
            bitops=sum(g.bitops() for g in gs) if quantized else 0,
            latency_ms=row_latency(name),
        ))
    total_latency = None
    if table is not None:
        total_latency = sum(r.latency_ms for r in rows)
    return CostReport(
        rows=tuple(rows),
        total_macs=sum(r.macs for r in rows),
        total_params=sum(r.params for r in rows),
        total_bitops=sum(r.bitops for r in rows),
        total_latency_ms=total_latency,
    )


def report_to_json(report: CostReport) -> dict:
    return {
        "rows": [{"name": r.name, "macs": r.macs, "params": r.params,
                  "bitops": r.bitops, "latency_ms": r.latency_ms}
                 for r in report.rows],
        "totals": {"macs": report.total_macs, "params": report.total_params,
                   "bitops": report.total_bitops,
                   "latency_ms": report.total_latency_ms},
    }


def format_report(report: CostReport) -> str:
    """Aligned plain-text cost table."""
    header = ("component", "macs", "params", "bitops", "latency_ms")
    body = [(r.name, f"{r.macs}", f"{r.params}", f"{r.bitops}",
             "-" if r.latency_ms is None else f"{r.latency_ms:.3f}")
            for r in report.rows]
    total_lat = ("-" if report.total_latency_ms is None
                 else f"{report.total_latency_ms:.3f}")
    body.append(("total", f"{report.total_macs}", f"{report.total_params}",
                 f"{report.total_bitops}", total_lat))
    widths = [max(len(row[i]) for row in [header] + body)
              for i in range(len(header))]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(col.rjust(w) if i else col.ljust(w)
                               for i, (col, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# fixed reference network for quantization cost checks


def residual_reference_rows(bits: tuple[int, int],
                            input_size: int = 224,
                            num_classes: int = 1000) -> list[ConvGeom]:
    """Geometry of an 18-layer two-conv residual network at uniform bits.

    The residual-stage convolutions are quantized at ``bits``; the first
    7x7 conv and the final linear layer stay full precision, so they never
    enter BitOps totals.  Used as a fixed reference point for bit-width
    cost accounting.
    """
    rows: list[ConvGeom] = []
    size = _out_size(input_size, 7, 2)
    rows.append(ConvGeom("conv1", 3, 64, 7, 2, 1, size, size))
    size = _out_size(size, 3, 2)  # 3x3 stride-2 max pool
    cin = 64
    for s, (cout, stride) in enumerate(((64, 1), (128, 2), (256, 2), (512, 2))):
        for b in range(2):
            st = stride if b == 0 else 1
            osize = _out_size(size, 3, st)
            pre = f"stage{s}.block{b}."
            rows.append(ConvGeom(pre + "conv1", cin, cout, 3, st, 1,
                                 osize, osize, bits=bits, alpha=True))
            rows.append(ConvGeom(pre + "conv2", cout, cout, 3, 1, 1,
                                 osize, osize, bits=bits, alpha=True))
            if st != 1 or cin != cout:
                rows.append(ConvGeom(pre + "down", cin, cout, 1, st, 1,
                                     osize, osize, bits=bits, alpha=True))
            cin = cout
            size = osize
    rows.append(ConvGeom("fc", 512, num_classes, 1, 1, 1, 1, 1,
                         bn=False, bias=True))
    return rows


def rows_macs(rows: list[ConvGeom]) -> int:
    return sum(g.macs() for g in rows)


def rows_bitops(rows: list[ConvGeom]) -> int:
    return sum(g.bitops() for g in rows)
