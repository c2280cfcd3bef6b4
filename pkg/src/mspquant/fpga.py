"""Analytical FPGA model: PE planning, resource utilization, throughput and latency.

Three GEMM cores share the device. Fixed-4 and Fixed-8 PEs live on DSP slices,
SPoT PEs are built from LUTs. Each layer's MACs are split across the cores by
their workload shares and the layer finishes when the slowest core does.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from importlib import resources

from .errors import InfeasiblePlanError, ValidationError
from .qmodel import MSP_RATIO, SchemeRatio

CALIBRATION_FILE = "calibration.json"
CALIBRATION_VERSION = 1


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    dsp_total: int
    lut_total: int
    bram36_total: float
    ff_total: int
    freq_mhz: float = 100.0

    def __post_init__(self):
        if min(self.dsp_total, self.lut_total, self.bram36_total, self.ff_total, self.freq_mhz) <= 0:
            raise ValidationError(f"device {self.name}: all totals must be positive")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                str(d["name"]), int(d["dsp_total"]), int(d["lut_total"]),
                float(d["bram36_total"]), int(d["ff_total"]), float(d.get("freq_mhz", 100.0)),
            )
        except KeyError as exc:
            raise ValidationError(f"device profile misses {exc}") from None


DEVICES = {
    "xc7z020": DeviceProfile("xc7z020", 220, 53_200, 70, 106_400),
    "xc7z045": DeviceProfile("xc7z045", 900, 218_600, 545, 437_200),
}


def get_device(name_or_profile) -> DeviceProfile:
    if isinstance(name_or_profile, DeviceProfile):
        return name_or_profile
    if isinstance(name_or_profile, dict):
        return DeviceProfile.from_dict(name_or_profile)
    key = str(name_or_profile).lower()
    if key not in DEVICES:
        raise ValidationError(f"unknown device {name_or_profile!r}; presets: {sorted(DEVICES)}")
    return DEVICES[key]


@dataclass(frozen=True)
class CostModel:
    """Per-PE resource costs and throughput efficiency.

    ``macs_per_cycle`` is the sustained MACs per PE per cycle (pipeline and
    memory stalls folded in). ``dsp_per_fixed8`` may be fractional: Fixed-8 PEs
    are charged ``ceil(count * dsp_per_fixed8)`` DSPs in total. ``lut_cap`` is the
    fraction of LUTs the planner may fill. BRAM and FF are affine in the DSP and
    SPoT PE counts.
    """

    macs_per_cycle: float
    dsp_per_fixed4: float
    dsp_per_fixed8: float
    lut_per_spot: float
    lut_per_dsp: float
    lut_overhead: float
    lut_cap: float
    bram: tuple = (0.0, 0.0, 0.0)
    ff: tuple = (0.0, 0.0, 0.0)
    wide_layer_dsp_factor: float = 4.0
    version: int = CALIBRATION_VERSION

    def __post_init__(self):
        pos = (self.macs_per_cycle, self.dsp_per_fixed4, self.dsp_per_fixed8, self.lut_per_spot, self.wide_layer_dsp_factor)
        if min(pos) <= 0 or self.lut_per_dsp < 0 or self.lut_overhead < 0 or not 0 < self.lut_cap <= 1:
            raise ValidationError("cost model constants must be positive and lut_cap in (0, 1]")
        object.__setattr__(self, "bram", tuple(float(v) for v in self.bram))
        object.__setattr__(self, "ff", tuple(float(v) for v in self.ff))

    def to_dict(self):
        d = asdict(self)
        d["bram"], d["ff"] = list(self.bram), list(self.ff)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("fit", None)
        if int(d.get("version", CALIBRATION_VERSION)) != CALIBRATION_VERSION:
            raise ValidationError(f"calibration version {d.get('version')} is not supported")
        return cls(**d)


def load_calibration(path=None) -> CostModel:
    """The shipped calibration, or a JSON file written by :func:`save_calibration`."""
    if path is None:
        text = resources.files("mspquant").joinpath(CALIBRATION_FILE).read_text()
    else:
        with open(path) as f:
            text = f.read()
    return CostModel.from_dict(json.loads(text))


def save_calibration(cost: CostModel, path, fit_info=None):
    d = cost.to_dict()
    if fit_info:
        d["fit"] = fit_info
    with open(path, "w") as f:
        json.dump(d, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass(frozen=True)
class PEPlan:
    device: str
    ratio: SchemeRatio
    spot_pes: int
    fixed_pes: int
    eight_pes: int
    dsp_fixed: int
    dsp_eight: int
    lut_used: float
    bram_used: float
    ff_used: float

    @property
    def dsp_used(self):
        return self.dsp_fixed + self.dsp_eight

    def core_pes(self):
        """PEs behind each workload share (spot, fixed, eight)."""
        return (self.spot_pes, self.fixed_pes, self.eight_pes)

    def scaled(self, k):
        """Same plan with every PE count multiplied by ``k`` (resources not recomputed)."""
        return replace(self, spot_pes=self.spot_pes * k, fixed_pes=self.fixed_pes * k, eight_pes=self.eight_pes * k)

    def to_dict(self):
        return {
            "spot_pes": self.spot_pes,
            "fixed_pes": self.fixed_pes,
            "eight_pes": self.eight_pes,
            "dsp_fixed": self.dsp_fixed,
            "dsp_eight": self.dsp_eight,
            "lut": round(self.lut_used, 3),
            "bram36": round(self.bram_used, 3),
            "ff": round(self.ff_used, 3),
        }


def _affine(coef, dsp, spot):
    return coef[0] + coef[1] * dsp + coef[2] * spot


def _dsp_split(D, f, e, cost: CostModel):
    """(fixed4 PEs, fixed8 PEs, DSPs on fixed4, DSPs on fixed8): all D DSPs used,
    PE counts proportional to the workload shares, leftovers to Fixed-4."""
    d4, d8 = cost.dsp_per_fixed4, cost.dsp_per_fixed8
    if f + e == 0:
        return 0, 0, 0, 0
    if e == 0:
        p4 = math.floor(D / d4)
        return p4, 0, D, 0
    p8 = math.floor(D * e / (f * d4 + e * d8))
    if f == 0:
        return 0, p8, 0, D
    dsp8 = math.ceil(p8 * d8)
    p4 = math.floor((D - dsp8) / d4)
    return p4, p8, D - dsp8, dsp8


def plan_cores(device, ratio: SchemeRatio, cost: CostModel | None = None) -> PEPlan:
    """Fill every DSP with Fixed-4/Fixed-8 PEs, then grow the SPoT core until its
    throughput matches its share (balanced finish) or the LUT budget runs out."""
    dev = get_device(device)
    cost = cost or load_calibration()
    s, f, e = (float(v) for v in (ratio.spot_frac, ratio.fixed_frac, ratio.eight_frac))
    D = dev.dsp_total
    p4, p8, dsp4, dsp8 = _dsp_split(D, f, e, cost)
    if (f > 0 and p4 == 0) or (e > 0 and p8 == 0):
        raise InfeasiblePlanError(f"{dev.name} has too few DSPs for ratio {ratio}")
    dsp_used = dsp4 + dsp8
    t_dsp = max(f / p4 if p4 else 0.0, e / p8 if p8 else 0.0)
    budget = cost.lut_cap * dev.lut_total - cost.lut_overhead - cost.lut_per_dsp * dsp_used
    p_max = max(0, math.floor(budget / cost.lut_per_spot))
    ps = 0
    if s > 0:
        ps = p_max if t_dsp == 0 else min(math.ceil(s / t_dsp - 1e-9), p_max)
        if ps == 0:
            raise InfeasiblePlanError(f"{dev.name} has no LUT budget left for SPoT PEs")
    if p4 + p8 + ps == 0:
        lut = bram = ff = 0.0
    else:
        lut = cost.lut_overhead + cost.lut_per_dsp * dsp_used + cost.lut_per_spot * ps
        bram = max(0.0, _affine(cost.bram, dsp_used, ps))
        ff = max(0.0, _affine(cost.ff, dsp_used, ps))
    plan = PEPlan(dev.name, ratio, ps, p4, p8, dsp4, dsp8, lut, bram, ff)
    if lut > dev.lut_total or bram > dev.bram36_total or ff > dev.ff_total or dsp_used > D:
        raise InfeasiblePlanError(f"plan for {dev.name} at {ratio} exceeds the device: {plan.to_dict()}")
    return plan


def utilization_report(plan: PEPlan, device) -> dict:
    """Fractions of each device resource in use (1.0 = 100%)."""
    dev = get_device(device)
    return {
        "dsp": plan.dsp_used / dev.dsp_total,
        "lut": plan.lut_used / dev.lut_total,
        "bram36": plan.bram_used / dev.bram36_total,
        "ff": plan.ff_used / dev.ff_total,
    }


@dataclass(frozen=True)
class LayerOps:
    name: str
    macs: int
    wide: bool = False  # runs unquantized on DSPs only, at a higher per-PE cost


@dataclass
class PerfEstimate:
    gops: float
    latency_ms: float
    total_macs: int
    per_layer: list = field(default_factory=list)


def layer_time(macs, plan: PEPlan, ratio: SchemeRatio, cost: CostModel, freq_hz, wide=False):
    """(seconds, bounding core) for one layer under balanced-finish scheduling."""
    rate = cost.macs_per_cycle * freq_hz
    if wide:
        pes = (plan.dsp_used / cost.dsp_per_fixed4) / cost.wide_layer_dsp_factor
        if pes <= 0:
            raise InfeasiblePlanError("no DSPs for an unquantized layer")
        return macs / (pes * rate), "wide"
    best = (0.0, "none")
    for name, share, pes in zip(("spot", "fixed", "eight"), (ratio.spot_frac, ratio.fixed_frac, ratio.eight_frac), plan.core_pes()):
        if share == 0:
            continue
        if pes <= 0:
            raise InfeasiblePlanError(f"{name} core has no PEs but a {float(share):.3f} workload share")
        t = float(share) * macs / (pes * rate)
        if t > best[0]:
            best = (t, name)
    return best


def estimate_perf(layers, plan: PEPlan, ratio: SchemeRatio, device, cost: CostModel | None = None) -> PerfEstimate:
    """Latency is the sum of layer times; GOPS counts 2 ops per MAC."""
    dev = get_device(device)
    cost = cost or load_calibration()
    freq = dev.freq_mhz * 1e6
    total = 0.0
    rows = []
    macs_total = 0
    for lo in layers:
        if lo.macs <= 0:
            continue
        t, core = layer_time(lo.macs, plan, ratio, cost, freq, lo.wide)
        total += t
        macs_total += lo.macs
        rows.append({"name": lo.name, "macs": int(lo.macs), "time_ms": t * 1e3, "bound": core})
    if total == 0:
        return PerfEstimate(0.0, 0.0, 0, rows)
    return PerfEstimate(2 * macs_total / total / 1e9, total * 1e3, macs_total, rows)


def _conv(name, cin, cout, k, out_hw):
    return LayerOps(name, cin * cout * k * k * out_hw * out_hw)


def resnet18_profile():
    """Per-layer MACs of ResNet-18 at 224x224 (downsample shortcuts included)."""
    layers = [_conv("conv1", 3, 64, 7, 112)]
    cin, hw = 64, 56
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if (stage > 1 and block == 0) else 1
            out_hw = hw // stride
            pre = f"layer{stage}.{block}"
            layers.append(_conv(pre + ".conv1", cin, cout, 3, out_hw))
            layers.append(_conv(pre + ".conv2", cout, cout, 3, out_hw))
            if stride == 2 or cin != cout:
                layers.append(_conv(pre + ".downsample", cin, cout, 1, out_hw))
            cin, hw = cout, out_hw
    layers.append(LayerOps("fc", 512 * 1000))
    return layers


def with_wide_ends(layers):
    """Mark the first and last layers as unquantized (wide)."""
    layers = list(layers)
    if layers:
        layers[0] = replace(layers[0], wide=True)
        layers[-1] = replace(layers[-1], wide=True)
    return layers


def network_profile(net, input_dims):
    """LayerOps of the dense/conv layers of a NetworkIR."""
    from .core import count_ops

    per_layer, _ = count_ops(net, input_dims)
    return [LayerOps(f"{i}:{net.layers[i].kind}", m) for i, m in enumerate(per_layer) if m > 0]


def throughput_gain(device, ratio=MSP_RATIO, cost=None, layers=None):
    """GOPS(ratio) / GOPS(fixed-only) on ``device``."""
    cost = cost or load_calibration()
    layers = layers or resnet18_profile()
    fixed = SchemeRatio(0, 1, 0)
    g = estimate_perf(layers, plan_cores(device, ratio, cost), ratio, device, cost).gops
    g0 = estimate_perf(layers, plan_cores(device, fixed, cost), fixed, device, cost).gops
    return g / g0


def end_to_end_speedup(device="xc7z045", ratio=MSP_RATIO, cost=None, layers=None):
    """Latency of fixed-only with unquantized first/last layers over latency of
    ``ratio`` with every layer quantized."""
    cost = cost or load_calibration()
    layers = layers or resnet18_profile()
    fixed = SchemeRatio(0, 1, 0)
    base = estimate_perf(with_wide_ends(layers), plan_cores(device, fixed, cost), fixed, device, cost)
    ours = estimate_perf(layers, plan_cores(device, ratio, cost), ratio, device, cost)
    return base.latency_ms / ours.latency_ms, base, ours


# -- calibration ----------------------------------------------------------------

# Measured hardware points: device, ratio, LUT, BRAM36, FF, ResNet-18 GOPS
# (all DSPs in use on every row).
PERF_TARGETS = (
    ("xc7z020", "0:1:0", 12_200, 39, 9_400, 31.8),
    ("xc7z020", "1.5:1:0", 28_300, 56, 17_100, 58.2),
    ("xc7z020", "1:1:0", 22_900, 49, 14_500, 51.6),
    ("xc7z020", "60:35:5", 31_100, 59, 20_500, 73.8),
    ("xc7z045", "0:1:0", 41_800, 160, 31_300, 120.5),
    ("xc7z045", "1:1:0", 93_400, 194, 65_700, 195.3),
    ("xc7z045", "2:1:0", 145_000, 225.5, 111_600, 244.5),
    ("xc7z045", "65:30:5", 151_400, 245, 114_200, 325.0),
)


def fit_calibration(d8_grid=None, cap_grid=None, layers=None):
    """Least-squares fit of the cost model to :data:`PERF_TARGETS`.

    ``dsp_per_fixed8`` and ``lut_cap`` enter through floors and ceilings, so they
    are grid-searched; the smooth constants (efficiency, LUT slopes, overhead)
    are fit on relative LUT and GOPS residuals at each grid point. BRAM and FF
    slopes are then ordinary linear least squares on the chosen plans.
    """
    import numpy as np
    from scipy.optimize import least_squares

    layers = layers or resnet18_profile()
    d8_grid = np.linspace(1.0, 3.0, 41) if d8_grid is None else d8_grid
    cap_grid = np.linspace(0.5, 1.0, 51) if cap_grid is None else cap_grid
    targets = [(get_device(d), SchemeRatio.proportional(r), lut, bram, ff, g) for d, r, lut, bram, ff, g in PERF_TARGETS]

    def make(y, d8, cap):
        return CostModel(max(y[0], 1e-6), 1.0, float(d8), max(y[1], 1e-6), max(y[2], 0.0), max(y[3], 0.0), float(cap))

    def residuals(y, d8, cap):
        cost = make(y, d8, cap)
        r = []
        for dev, ratio, lut, _, _, g in targets:
            try:
                plan = plan_cores(dev, ratio, cost)
                perf = estimate_perf(layers, plan, ratio, dev, cost)
            except InfeasiblePlanError:
                return np.full(2 * len(targets), 10.0)
            r += [(plan.lut_used - lut) / lut, (perf.gops - g) / g]
        return np.array(r)

    best = None
    for d8 in d8_grid:
        for cap in cap_grid:
            sol = least_squares(
                residuals, [0.7, 55.0, 43.0, 2600.0], args=(d8, cap),
                bounds=([0.1, 1.0, 0.0, 0.0], [4.0, 500.0, 200.0, 2e4]),
            )
            if best is None or sol.cost < best[0] - 1e-15:
                best = (float(sol.cost), float(d8), float(cap), sol.x)
    cost0, d8, cap, y = best
    cost = make(y, d8, cap)
    X, yb, yf = [], [], []
    for dev, ratio, _, bram, ff, _ in targets:
        plan = plan_cores(dev, ratio, replace(cost, bram=(0, 0, 0), ff=(0, 0, 0)))
        X.append([1.0, plan.dsp_used, plan.spot_pes])
        yb.append(bram)
        yf.append(ff)
    X = np.array(X)
    bram = np.linalg.lstsq(X, np.array(yb), rcond=None)[0]
    ff = np.linalg.lstsq(X, np.array(yf), rcond=None)[0]
    cost = replace(cost, bram=tuple(float(v) for v in bram), ff=tuple(float(v) for v in ff))
    return cost, {"objective": cost0, "rows": len(targets)}


def calibration_table(cost: CostModel | None = None, layers=None):
    """Model vs measured rows for :data:`PERF_TARGETS`."""
    cost = cost or load_calibration()
    layers = layers or resnet18_profile()
    rows = []
    for d, r, lut, bram, ff, g in PERF_TARGETS:
        ratio = SchemeRatio.proportional(r)
        plan = plan_cores(d, ratio, cost)
        perf = estimate_perf(layers, plan, ratio, d, cost)
        rows.append({
            "device": d, "ratio": r,
            "lut": plan.lut_used, "lut_measured": lut,
            "bram36": plan.bram_used, "bram36_measured": bram,
            "ff": plan.ff_used, "ff_measured": ff,
            "gops": perf.gops, "gops_measured": g,
        })
    return rows


# -- reports --------------------------------------------------------------------

def estimate_report(device, ratio: SchemeRatio, layers, cost: CostModel | None = None) -> dict:
    dev = get_device(device)
    cost = cost or load_calibration()
    plan = plan_cores(dev, ratio, cost)
    perf = estimate_perf(layers, plan, ratio, dev, cost)
    util = utilization_report(plan, dev)
    return {
        "device": dev.name,
        "ratio": str(ratio),
        "plan": plan.to_dict(),
        "utilization": {k: round(v, 6) for k, v in util.items()},
        "dsp_util": round(util["dsp"], 6),
        "gops": round(perf.gops, 6),
        "latency_ms": round(perf.latency_ms, 6),
        "per_layer": [
            {"name": r["name"], "macs": r["macs"], "time_ms": round(r["time_ms"], 9), "bound": r["bound"]}
            for r in perf.per_layer
        ],
    }


PERF_CSV_COLUMNS = ("device", "ratio", "lut", "lut_pct", "dsp", "dsp_pct", "bram36", "bram36_pct", "ff", "ff_pct", "gops")


def perf_csv(reports) -> str:
    """Rows in the layout of a device/ratio performance table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PERF_CSV_COLUMNS)
    for rep in reports:
        p, u = rep["plan"], rep["utilization"]
        w.writerow([
            rep["device"], rep["ratio"],
            f"{p['lut']:.0f}", f"{100 * u['lut']:.1f}",
            p["dsp_fixed"] + p["dsp_eight"], f"{100 * u['dsp']:.1f}",
            f"{p['bram36']:.1f}", f"{100 * u['bram36']:.1f}",
            f"{p['ff']:.0f}", f"{100 * u['ff']:.1f}",
            f"{rep['gops']:.1f}",
        ])
    return buf.getvalue()


def ratio_sweep(device, spot_fracs, eight_frac=Fraction(0), cost=None, layers=None):
    """(spot_frac, GOPS, LUT utilization) along a sweep with the rest on Fixed-4."""
    cost = cost or load_calibration()
    layers = layers or resnet18_profile()
    dev = get_device(device)
    out = []
    for s in spot_fracs:
        s = Fraction(s).limit_denominator(10**6)
        ratio = SchemeRatio(s, 1 - s - Fraction(eight_frac), Fraction(eight_frac))
        plan = plan_cores(dev, ratio, cost)
        perf = estimate_perf(layers, plan, ratio, dev, cost)
        out.append((float(s), perf.gops, utilization_report(plan, dev)["lut"]))
    return out
