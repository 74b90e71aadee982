"""Conv/matmul layer shapes and the line-oriented workload format.

A workload document looks like::

    # comments and blank lines are ignored
    name: toy_cnn
    layer R=3 S=3 P=8 Q=8 C=4 K=8 N=1 Pstride=1 Qstride=1
    layer R=1 S=1 P=8 Q=8 C=8 K=8 N=1 repeat=2

Missing strides default to 1 and ``repeat`` defaults to 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

DIMS = ("R", "S", "P", "Q", "C", "K", "N")
R, S, P, Q, C, K, N = range(7)
TENSORS = ("W", "I", "O")
W, I, O = range(3)

# Problem dimensions that index each tensor.
RELEVANT = {
    W: frozenset((R, S, C, K)),
    I: frozenset((R, S, P, Q, C, N)),
    O: frozenset((P, Q, K, N)),
}


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    R: int
    S: int
    P: int
    Q: int
    C: int
    K: int
    N: int = 1
    Pstride: int = 1
    Qstride: int = 1

    def __post_init__(self):
        for name in DIMS + ("Pstride", "Qstride"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise WorkloadError(f"{name} must be a positive integer, got {v!r}")

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(getattr(self, d) for d in DIMS)

    @classmethod
    def matmul(cls, M: int, Kdim: int, Ndim: int) -> "LayerShape":
        """(M x K) @ (K x N): rows map to P, reduction to C, columns to K."""
        return cls(R=1, S=1, P=M, Q=1, C=Kdim, K=Ndim, N=1)

    def to_record(self) -> str:
        fields = " ".join(f"{d}={getattr(self, d)}" for d in DIMS)
        return f"layer {fields} Pstride={self.Pstride} Qstride={self.Qstride}"


def layer_macs(layer: LayerShape) -> int:
    return prod(layer.extents)


@dataclass
class Network:
    name: str
    layers: list[tuple[LayerShape, int]] = field(default_factory=list)

    def __post_init__(self):
        merged: dict[LayerShape, int] = {}
        for layer, repeat in self.layers:
            if repeat < 1:
                raise WorkloadError(f"repeat count must be positive, got {repeat}")
            merged[layer] = merged.get(layer, 0) + repeat
        self.layers = list(merged.items())

    @property
    def shapes(self) -> list[LayerShape]:
        return [layer for layer, _ in self.layers]

    @property
    def repeats(self) -> list[int]:
        return [r for _, r in self.layers]

    def __len__(self):
        return len(self.layers)


_INT_KEYS = set(DIMS) | {"Pstride", "Qstride", "repeat"}


def parse_workload(text: str) -> Network:
    name = "network"
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("name:"):
            name = line[len("name:"):].strip() or name
            continue
        head, _, rest = line.partition(" ")
        if head != "layer":
            raise WorkloadError(f"line {lineno}: unknown record {head!r}")
        values = {}
        for token in rest.split():
            key, sep, val = token.partition("=")
            if not sep:
                raise WorkloadError(f"line {lineno}: expected key=value, got {token!r}")
            if key not in _INT_KEYS:
                raise WorkloadError(f"line {lineno}: unknown field {key!r}")
            try:
                values[key] = int(val)
            except ValueError:
                raise WorkloadError(f"line {lineno}: field {key} is not an integer: {val!r}") from None
        missing = [d for d in DIMS if d not in values]
        if missing:
            raise WorkloadError(f"line {lineno}: missing field(s) {', '.join(missing)}")
        repeat = values.pop("repeat", 1)
        try:
            layer = LayerShape(**values)
        except WorkloadError as exc:
            raise WorkloadError(f"line {lineno}: {exc}") from None
        if repeat < 1:
            raise WorkloadError(f"line {lineno}: repeat must be positive, got {repeat}")
        layers.append((layer, repeat))
    return Network(name, layers)


def serialize_workload(net: Network) -> str:
    lines = [f"name: {net.name}"]
    for layer, repeat in net.layers:
        lines.append(f"{layer.to_record()} repeat={repeat}")
    return "\n".join(lines) + "\n"


def load_workload(path) -> Network:
    with open(path) as fh:
        return parse_workload(fh.read())


def toy_cnn() -> Network:
    """Five small conv layers used by the tests and the desk-scale experiments."""
    return Network("toy_cnn", [
        (LayerShape(R=3, S=3, P=16, Q=16, C=3, K=16), 1),
        (LayerShape(R=3, S=3, P=8, Q=8, C=16, K=32, Pstride=2, Qstride=2), 1),
        (LayerShape(R=3, S=3, P=8, Q=8, C=32, K=32), 2),
        (LayerShape(R=1, S=1, P=8, Q=8, C=32, K=64), 1),
        (LayerShape(R=3, S=3, P=4, Q=4, C=64, K=64, Pstride=2, Qstride=2), 1),
    ])


def toy_matmul() -> Network:
    return Network("toy_matmul", [
        (LayerShape.matmul(64, 128, 128), 2),
        (LayerShape.matmul(64, 128, 512), 1),
        (LayerShape.matmul(64, 512, 128), 1),
    ])
