"""Learned latency correction on top of the analytical model.

A small MLP predicts ``log(measured) - log(analytical)`` from layer, mapping
and hardware features.  The corrected latency multiplies the analytical
estimate by ``exp(residual)``, with the residual clamped to a factor of 10
either way.  Inference is written against plain arithmetic so it composes
with :class:`~diffdse.gradient.Var` grids; training uses vectorised numpy
backprop and the shared :class:`~diffdse.gradient.Adam`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchConfig, ArchParams, finalize_arch, infer_min_hw, make_arch
from .gradient import Adam, exp, log, maximum, minimum, relu, value
from .mapping import (DRAM, LEVELS, ORDER_CHOICES, ORDERINGS, SPATIAL, TEMPORAL,
                      LayerMapping, prime_factors, validate)
from .perfmodel import evaluate_layer
from .workload import C, DIMS, K, LayerShape, WorkloadError

SAMPLE_SCHEMA = "diffdse.samples.v1"
LOSS_SCHEMA = "diffdse.loss_curve.v1"
HIDDEN = (48, 32, 24, 24, 16, 16, 8)
CLAMP = math.log(10.0)
MIN_SAMPLES = 50
# |z-score| beyond which a feature counts as out of the training domain.
DOMAIN_Z = 6.0

_GRID_COLS = [f"f_{'ST'[k]}{i}_{DIMS[d]}" for k in range(2) for i in range(LEVELS)
              for d in range(7)]
SAMPLE_HEADER = (list(DIMS) + ["Pstride", "Qstride"] + _GRID_COLS
                 + ["order_L1", "order_L2", "order_L3", "pe_side", "accumulator_bytes",
                    "scratchpad_bytes", "measured_latency"])


class CorrectionError(ValueError):
    pass


# -- samples ----------------------------------------------------------------------

@dataclass
class MeasuredSample:
    mapping: LayerMapping
    arch: ArchConfig
    measured: float

    @property
    def layer(self) -> LayerShape:
        return self.mapping.layer

    def analytical(self) -> float:
        return float(evaluate_layer(self.mapping.grid(), self.layer, self.mapping.ordering,
                                    self.arch).latency)


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (row number, reason)

    def __len__(self):
        return len(self.samples)


def _arch_row(arch: ArchConfig) -> list:
    return [math.isqrt(int(round(value(arch.c_pe)))), int(round(arch.accumulator_bytes)),
            int(round(arch.scratchpad_bytes))]


def format_samples(samples) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {SAMPLE_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_HEADER)
    for s in samples:
        layer = s.layer
        row = list(layer.extents) + [layer.Pstride, layer.Qstride]
        row += [f"{x:.17g}" for x in s.mapping.factors.reshape(-1)]
        row += list(s.mapping.ordering) + _arch_row(s.arch) + [repr(float(s.measured))]
        w.writerow(row)
    return buf.getvalue()


def parse_samples(text: str, params: ArchParams | None = None) -> Dataset:
    """Parse a sample CSV.

    Structural problems (wrong header, wrong column count, non-numeric
    values) raise naming the row.  Rows that parse but describe an invalid
    mapping or a non-positive latency are skipped and listed in
    ``Dataset.rejected``.
    """
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    data = Dataset()
    if not any(ln.strip() for ln in lines):
        return data
    reader = csv.reader(lines)
    header = next(reader)
    if header != SAMPLE_HEADER:
        raise CorrectionError("sample CSV header does not match the declared schema")
    n_dims = 9
    for rowno, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(SAMPLE_HEADER):
            raise CorrectionError(f"row {rowno}: expected {len(SAMPLE_HEADER)} columns, "
                                  f"got {len(row)}")
        try:
            dims = [int(v) for v in row[:n_dims]]
            grid = np.array([float(v) for v in row[n_dims:n_dims + 56]]).reshape(2, LEVELS, 7)
            order = tuple(row[n_dims + 56:n_dims + 59])
            side, acc, spad = (int(v) for v in row[n_dims + 59:n_dims + 62])
            measured = float(row[-1])
        except ValueError as exc:
            raise CorrectionError(f"row {rowno}: {exc}") from None
        if not measured > 0 or not math.isfinite(measured):
            data.rejected.append((rowno, f"measured latency {measured!r} is not positive"))
            continue
        if any(o not in ORDER_CHOICES for o in order):
            data.rejected.append((rowno, f"bad ordering {order!r}"))
            continue
        try:
            layer = LayerShape(**dict(zip(DIMS + ("Pstride", "Qstride"), dims)))
            arch = make_arch(side, acc, spad, params)
        except (WorkloadError, ValueError) as exc:
            data.rejected.append((rowno, str(exc)))
            continue
        mapping = LayerMapping(grid, layer, order)
        check = validate(mapping)
        if not check:
            data.rejected.append((rowno, "; ".join(check.problems)))
            continue
        data.samples.append(MeasuredSample(mapping, arch, measured))
    return data


def load_samples(path, params: ArchParams | None = None) -> Dataset:
    with open(path) as fh:
        return parse_samples(fh.read(), params)


def split(samples, test_fraction: float = 0.2, seed: int = 0):
    """Deterministic train/test split by a seeded shuffle."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_test = int(round(test_fraction * len(samples)))
    test = [samples[j] for j in order[:n_test]]
    train = [samples[j] for j in order[n_test:]]
    return train, test


# -- features ---------------------------------------------------------------------

def features(grid, layer: LayerShape, ordering, arch: ArchConfig, analytical) -> list:
    """45 features; entries are Vars whenever the grid, arch or latency are."""
    out = [math.log(e) for e in layer.extents]
    out += [math.log(layer.Pstride), math.log(layer.Qstride)]
    for i in (1, 2, DRAM):
        out += [log(grid[TEMPORAL][i][d]) for d in range(7)]
    out += [log(grid[SPATIAL][1][C]), log(grid[SPATIAL][2][K])]
    out += [log(arch.c_pe), log(arch.c1), log(arch.c2), log(analytical)]
    for o in ordering:
        out += [1.0 if o == c else 0.0 for c in ORDER_CHOICES]
    return out


N_FEATURES = 45


def sample_features(s: MeasuredSample) -> np.ndarray:
    return np.array(features(s.mapping.grid(), s.layer, s.mapping.ordering, s.arch,
                             s.analytical()))


def design_matrix(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features, log-residual targets and analytical latencies."""
    X, y, ana = [], [], []
    for s in samples:
        a = s.analytical()
        X.append(features(s.mapping.grid(), s.layer, s.mapping.ordering, s.arch, a))
        y.append(math.log(s.measured) - math.log(a))
        ana.append(a)
    return (np.array(X, dtype=float).reshape(-1, N_FEATURES), np.array(y), np.array(ana))


# -- model ------------------------------------------------------------------------

@dataclass
class CorrectionModel:
    weights: list   # arrays of shape (out, in)
    biases: list
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def zeros(cls, hidden=HIDDEN, n_in: int = N_FEATURES) -> "CorrectionModel":
        sizes = [n_in, *hidden, 1]
        return cls([np.zeros((b, a)) for a, b in zip(sizes, sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]], np.zeros(n_in), np.ones(n_in))

    @classmethod
    def init(cls, rng: np.random.Generator, hidden=HIDDEN, n_in: int = N_FEATURES):
        sizes = [n_in, *hidden, 1]
        ws = [rng.normal(0.0, math.sqrt(2.0 / a), size=(b, a)) for a, b in zip(sizes, sizes[1:])]
        # A zero output layer makes the untrained model the identity correction.
        ws[-1][:] = 0.0
        return cls(ws, [np.zeros(b) for b in sizes[1:]], np.zeros(n_in), np.ones(n_in))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Raw (unclamped) residuals for a batch of feature rows."""
        h = (np.atleast_2d(X) - self.mean) / self.std
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if j < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h[:, 0]

    def residual(self, feats):
        """Unclamped residual for one feature list; works on Vars."""
        if not any(hasattr(f, "grad") for f in feats):
            return float(self.predict(np.array(feats, dtype=float))[0])
        h = [(f - m) / s for f, m, s in zip(feats, self.mean, self.std)]
        last = len(self.weights) - 1
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            nxt = []
            for row, bias in zip(w, b):
                acc = float(bias)
                for wij, x in zip(row, h):
                    if wij != 0.0:
                        acc = acc + float(wij) * x
                nxt.append(acc if j == last else relu(acc))
            h = nxt
        return h[0]

    def in_domain(self, feats) -> bool:
        z = (np.array([value(f) for f in feats]) - self.mean) / self.std
        return bool(np.all(np.abs(z) <= DOMAIN_Z))

    def to_json(self) -> str:
        return json.dumps({
            "schema": "diffdse.correction.v1",
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CorrectionModel":
        try:
            d = json.loads(text)
            return cls([np.array(w, dtype=float) for w in d["weights"]],
                       [np.array(b, dtype=float) for b in d["biases"]],
                       np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorrectionError(f"bad correction checkpoint: {exc}") from None


def clamp_residual(r):
    return maximum([minimum([r, CLAMP]), -CLAMP])


def corrected_latency(analytical, feats, model: CorrectionModel):
    """``analytical * exp(clamped residual)``; a zero model returns it unchanged."""
    return analytical * exp(clamp_residual(model.residual(feats)))


def corrected_layer_latency(grid, layer, ordering, arch, analytical, model):
    return corrected_latency(analytical, features(grid, layer, ordering, arch, analytical), model)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class TrainResult:
    model: CorrectionModel
    train_loss: list
    test_loss: list


def mse_and_grads(model: CorrectionModel, X: np.ndarray, y: np.ndarray):
    """Mean squared log-residual error and its gradients by manual backprop."""
    acts = [(X - model.mean) / model.std]
    pre = []
    for j, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if j < len(model.weights) - 1 else z)
    err = acts[-1][:, 0] - y
    loss = float(np.mean(err ** 2))
    delta = (2.0 / len(y)) * err[:, None]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for j in range(len(model.weights) - 1, -1, -1):
        if j < len(model.weights) - 1:
            delta = delta * (pre[j] > 0)
        gw[j] = delta.T @ acts[j]
        gb[j] = delta.sum(axis=0)
        delta = delta @ model.weights[j]
    return loss, gw, gb


def _flat(arrays) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in arrays])


def _unflat(vec, like) -> list:
    out, pos = [], 0
    for a in like:
        out.append(vec[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return out


def train(samples, config: TrainConfig | None = None) -> TrainResult:
    config = config or TrainConfig()
    if len(samples) < MIN_SAMPLES:
        raise CorrectionError(f"need at least {MIN_SAMPLES} samples to train, got {len(samples)}")
    train_s, test_s = split(samples, config.test_fraction, config.seed)
    Xtr, ytr, _ = design_matrix(train_s)
    Xte, yte, _ = design_matrix(test_s)
    rng = np.random.default_rng(config.seed)
    model = CorrectionModel.init(rng)
    model.mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    model.std = np.where(std > 1e-12, std, 1.0)
    model.biases[-1][:] = ytr.mean()
    opt = Adam(config.learning_rate)
    params = _flat(model.weights + model.biases)
    n_w = len(model.weights)
    decay_mask = _flat([np.ones_like(w) for w in model.weights]
                       + [np.zeros_like(b) for b in model.biases])
    train_curve, test_curve = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(len(ytr))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, gw, gb = mse_and_grads(model, Xtr[idx], ytr[idx])
            if not math.isfinite(loss):
                raise CorrectionError(f"non-finite training loss at epoch {epoch}")
            g = _flat(gw + gb) + config.weight_decay * params * decay_mask
            params = opt.step(params, g)
            parts = _unflat(params, model.weights + model.biases)
            model.weights, model.biases = parts[:n_w], parts[n_w:]
        tr = float(np.mean((model.predict(Xtr) - ytr) ** 2))
        te = float(np.mean((model.predict(Xte) - yte) ** 2)) if len(yte) else math.nan
        if not math.isfinite(tr):
            raise CorrectionError(f"non-finite training loss at epoch {epoch}")
        train_curve.append(tr)
        test_curve.append(te)
    return TrainResult(model, train_curve, test_curve)


def format_loss_curve(result: TrainResult) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {LOSS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "test_loss"])
    for j, (a, b) in enumerate(zip(result.train_loss, result.test_loss)):
        w.writerow([j, repr(a), repr(b)])
    return buf.getvalue()


def evaluate_correction(model: CorrectionModel, samples) -> dict:
    """Spearman correlation with measured latency, analytical vs corrected."""
    X, _, ana = design_matrix(samples)
    r = np.clip(model.predict(X), -CLAMP, CLAMP)
    measured = np.array([s.measured for s in samples])
    corrected = ana * np.exp(r)
    return {"spearman_analytical": spearman(ana, measured),
            "spearman_corrected": spearman(corrected, measured)}


# -- rank statistics --------------------------------------------------------------

def rankdata(x) -> np.ndarray:
    """1-based ranks; ties share the average of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    j = 0
    while j < len(x):
        k = j
        while k + 1 < len(x) and sx[k + 1] == sx[j]:
            k += 1
        ranks[order[j:k + 1]] = 0.5 * (j + k) + 1.0
        j = k + 1
    return ranks


def spearman(a, b) -> float:
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    return float(ra @ rb) / denom if denom > 0 else math.nan


# -- synthetic data ---------------------------------------------------------------

RESIDUAL_KINDS = ("zero", "constant", "structured")


def structured_residual(mapping: LayerMapping, arch: ArchConfig) -> float:
    """Effects the roofline ignores: a poorly filled array and short inner
    loops both cost pipeline bubbles, and weight-stationary registers help."""
    f = mapping.factors
    side = math.sqrt(value(arch.c_pe))
    fill = (f[SPATIAL, 1, C] * f[SPATIAL, 2, K]) / (side * side)
    inner = float(np.prod(f[TEMPORAL, 1]))
    r = 0.8 * math.log(1.0 / fill) / math.log(side * side + 1.0)
    r += 1.2 / (1.0 + inner)
    r -= 0.4 * (mapping.ordering[0] == "WS")
    return r


def _random_factors(layer: LayerShape, rng, max_side: int) -> np.ndarray:
    f = np.ones((2, LEVELS, 7))
    for d, extent in enumerate(layer.extents):
        slots = [(TEMPORAL, 1), (TEMPORAL, 2), (TEMPORAL, DRAM)]
        if d == C:
            slots.append((SPATIAL, 1))
        if d == K:
            slots.append((SPATIAL, 2))
        for p in prime_factors(extent):
            k, i = slots[int(rng.integers(len(slots)))]
            if k == SPATIAL and f[k, i, d] * p > max_side:
                k, i = TEMPORAL, DRAM
            f[k, i, d] *= p
    return f


def _random_layer(rng) -> LayerShape:
    pick = lambda xs: int(xs[int(rng.integers(len(xs)))])
    return LayerShape(R=pick([1, 3]), S=pick([1, 3]), P=pick([2, 4, 8]), Q=pick([2, 4, 8]),
                      C=pick([2, 4, 8, 16]), K=pick([2, 4, 8, 16]), N=pick([1, 2]),
                      Pstride=pick([1, 2]), Qstride=pick([1, 2]))


def synthetic_samples(n: int, seed: int = 0, kind: str = "structured", noise: float = 0.05,
                      reference: str = "oracle", params: ArchParams | None = None) -> list:
    """Random small layers and mappings with stand-in "measured" latencies.

    The base latency comes from the brute-force oracle (``reference="oracle"``)
    or the closed-form model; it is then scaled by ``exp(residual)`` times
    lognormal noise.  ``kind`` selects a zero, constant (x2) or structured
    residual.
    """
    if kind not in RESIDUAL_KINDS:
        raise CorrectionError(f"unknown residual kind {kind!r}")
    from .oracle import oracle_latency, simulate_traffic
    params = params or ArchParams()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        layer = _random_layer(rng)
        side_cap = 2 ** int(rng.integers(0, 5))
        f = _random_factors(layer, rng, side_cap)
        ordering = ORDERINGS[int(rng.integers(len(ORDERINGS)))]
        m = LayerMapping(f, layer, ordering)
        need = finalize_arch(infer_min_hw([m], params))
        side = max(math.isqrt(int(need.c_pe)), side_cap)
        slack = 2 ** int(rng.integers(0, 3))
        arch = make_arch(side, int(need.accumulator_bytes) * slack,
                         int(need.scratchpad_bytes) * slack, params)
        if reference == "oracle":
            base = oracle_latency(simulate_traffic(m, params.bypass), arch, m)
        else:
            base = float(evaluate_layer(m.grid(), layer, ordering, arch).latency)
        if kind == "zero":
            r = 0.0
        elif kind == "constant":
            r = math.log(2.0)
        else:
            r = structured_residual(m, arch)
        eps = float(rng.normal(0.0, noise)) if noise > 0 else 0.0
        out.append(MeasuredSample(m, arch, base * math.exp(r + eps)))
    return out
