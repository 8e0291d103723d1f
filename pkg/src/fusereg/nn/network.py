"""Network container: an ordered layer graph with one optional skip concat.

NetworkSpec is a declarative list of layer descriptors. Shape chaining is
validated at construction time, so a mismatched architecture fails before
any arithmetic happens. The default TRE-regression architecture is built by
``default_metric_spec()`` and checked against the stricter structural
contract (9 convs, one concat, BN after conv 2 and after the concat,
scalar FC head) by ``validate_structure``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from ..volume import Volume3D
from .layers import BatchNorm, ConcatSkip, Conv3d, Flatten, Linear, MaxPool3d, ReLU

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "Network",
    "default_metric_spec",
    "normalize_intensities",
    "predict_tre",
    "predict_tre_batch",
]

_EVAL_LOCK = threading.Lock()


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)

    _KINDS = ("conv3d", "relu", "batchnorm", "maxpool", "concat", "flatten", "fc")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Input channel/spatial dims plus the ordered layer list."""

    input_shape: tuple  # (C, D, H, W)
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 4 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, D, H, W) positive, got {self.input_shape}")

    def to_json_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"kind": l.kind, **l.args} for l in self.layers],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            layers.append(LayerSpec(kind, entry))
        return NetworkSpec(tuple(d["input_shape"]), tuple(layers))

    def validate_structure(self) -> None:
        """Enforce the full-metric architecture contract: exactly 9 stride-1
        convs, one concat, BN right after conv #2 and right after the concat,
        and a scalar FC head."""
        conv_positions = [i for i, l in enumerate(self.layers) if l.kind == "conv3d"]
        if len(conv_positions) != 9:
            raise ValueError(f"metric network needs exactly 9 conv layers, found {len(conv_positions)}")
        if any(l.args.get("stride", 1) != 1 for l in self.layers if l.kind == "conv3d"):
            raise ValueError("metric network convs must use stride 1")
        concat_positions = [i for i, l in enumerate(self.layers) if l.kind == "concat"]
        if len(concat_positions) != 1:
            raise ValueError(f"metric network needs exactly one concat, found {len(concat_positions)}")
        bn_positions = {i for i, l in enumerate(self.layers) if l.kind == "batchnorm"}
        if conv_positions[1] + 1 not in bn_positions:
            raise ValueError("batchnorm must immediately follow conv #2")
        if concat_positions[0] + 1 not in bn_positions:
            raise ValueError("batchnorm must immediately follow the concat")
        fc_positions = [l for l in self.layers if l.kind == "fc"]
        if not fc_positions or self.layers[-1].kind != "fc" or fc_positions[-1].args["out_features"] != 1:
            raise ValueError("metric network must end in a scalar fc head")


def default_metric_spec(side: int = 32) -> NetworkSpec:
    """The TRE-regression metric network on a 2-channel cubic input.

    Channels 2-8-8-16-16-32-32-32-32-32, 3^3 kernels with pad 1, ReLU after
    every conv, 2^3 max pools after conv 3 and conv 6, skip taken from the
    BN after conv 2, concatenated (pooled twice) with conv 9's output, BN,
    then FC 64 -> scalar.
    """
    conv = lambda i, o: LayerSpec("conv3d", {"in_ch": i, "out_ch": o, "kernel": 3, "stride": 1, "pad": 1})
    relu = LayerSpec("relu")
    layers = [
        conv(2, 8), relu,                                   # 0-1   32^3
        conv(8, 8),                                          # 2
        LayerSpec("batchnorm", {"channels": 8}),             # 3     skip source
        relu,                                                # 4
        conv(8, 16), relu, LayerSpec("maxpool", {"window": 2}),   # 5-7   -> 16^3
        conv(16, 16), relu,                                  # 8-9
        conv(16, 32), relu,                                  # 10-11
        conv(32, 32), relu, LayerSpec("maxpool", {"window": 2}),  # 12-14 -> 8^3
        conv(32, 32), relu,                                  # 15-16
        conv(32, 32), relu,                                  # 17-18
        conv(32, 32), relu,                                  # 19-20
        LayerSpec("concat", {"source_index": 3}),            # 21    8 + 32 = 40 ch
        LayerSpec("batchnorm", {"channels": 40}),            # 22
        LayerSpec("flatten"),                                # 23
        LayerSpec("fc", {"in_features": 40 * (side // 4) ** 3, "out_features": 64}),
        relu,
        LayerSpec("fc", {"in_features": 64, "out_features": 1, "zero_init": True}),
    ]
    spec = NetworkSpec((2, side, side, side), tuple(layers))
    spec.validate_structure()
    return spec


class Network:
    """Executable network: builds layers from a spec and validates shapes.

    forward/backward use the channel-major internal layout (C, N, D, H, W);
    ``run`` accepts the conventional (N, C, D, H, W) input.
    """

    def __init__(self, spec: NetworkSpec, dtype=np.float32, seed: int = 0):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        self._skip_sources = set()
        shape = (spec.input_shape[0], 1) + tuple(spec.input_shape[1:])
        self._shapes = [shape]
        for ls in spec.layers:
            layer = self._build(ls, rng)
            if isinstance(layer, ConcatSkip):
                src = layer.source_index
                if not 0 <= src < len(self.layers):
                    raise ValueError(f"concat source index {src} out of range")
                self._skip_sources.add(src)
                shape = layer.out_shape_pair(self._shapes[src + 1], shape)
            else:
                shape = layer.out_shape(shape)
            self.layers.append(layer)
            self._shapes.append(shape)
        if shape[0] != 1 or len(shape) != 2:
            # tolerate non-scalar heads for miniature/diagnostic nets
            pass

    def _build(self, ls: LayerSpec, rng):
        a = ls.args
        if ls.kind == "conv3d":
            if a.get("stride", 1) != 1:
                raise ValueError("only stride-1 convolutions are supported in the network graph")
            return Conv3d(a["in_ch"], a["out_ch"], a.get("kernel", 3), a.get("pad", 0), self.dtype, rng)
        if ls.kind == "relu":
            return ReLU()
        if ls.kind == "batchnorm":
            return BatchNorm(a["channels"], a.get("momentum", 0.9), a.get("eps", 1e-5), self.dtype)
        if ls.kind == "maxpool":
            return MaxPool3d(a.get("window", 2))
        if ls.kind == "concat":
            return ConcatSkip(a["source_index"])
        if ls.kind == "flatten":
            return Flatten()
        if ls.kind == "fc":
            return Linear(a["in_features"], a["out_features"], self.dtype, rng, a.get("zero_init", False))
        raise ValueError(f"unknown layer kind {ls.kind}")

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """x: (C, N, D, H, W) channel-major. Returns the final activation
        ((1, N) for scalar-head networks)."""
        expect = self.spec.input_shape
        if x.shape[0] != expect[0] or tuple(x.shape[2:]) != tuple(expect[1:]):
            raise ValueError(f"input shape {x.shape} does not match spec {expect}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        saved = {}
        out = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConcatSkip):
                out = layer.forward_pair(saved[layer.source_index], out, training=training)
            else:
                out = layer.forward(out, training=training)
            if i in self._skip_sources:
                saved[i] = out
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite activation in network output")
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last training forward.
        Returns the gradient with respect to the network input."""
        pending = {}
        g = np.ascontiguousarray(grad_out, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i in pending:
                g = g + pending.pop(i)
            if isinstance(layer, ConcatSkip):
                g_skip, g = layer.backward_pair(g)
                j = layer.source_index
                pending[j] = pending.get(j, 0) + g_skip
            else:
                g = layer.backward(g)
        return g

    def run(self, x_ncdhw: np.ndarray, training: bool = False) -> np.ndarray:
        """Forward on (N, C, D, H, W) input; returns (N,) for scalar heads."""
        xm = np.ascontiguousarray(np.moveaxis(np.asarray(x_ncdhw), 1, 0))
        out = self.forward(xm, training=training)
        if out.ndim == 2 and out.shape[0] == 1:
            return out[0]
        return np.moveaxis(out, 0, 1)

    # -- parameter plumbing --------------------------------------------------

    def named_params(self):
        """Deterministic (name, array) iteration in layer order."""
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"layer{i}.{key}", layer.params[key]
            if isinstance(layer, BatchNorm):
                yield f"layer{i}.running_mean", layer.running_mean
                yield f"layer{i}.running_var", layer.running_var

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"layer{i}.{key}", layer.grads[key]

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def param_count(self) -> int:
        return sum(int(np.prod(p.shape)) for _, p in self.named_params())


def normalize_intensities(data: np.ndarray) -> np.ndarray:
    """Per-volume min-max normalization to [0, 1]; constant volumes map to 0."""
    x = np.asarray(data, dtype=np.float32)
    lo = float(x.min())
    hi = float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _check_input_grid(net: Network, vol: Volume3D):
    c, d, h, w = net.spec.input_shape
    nx, ny, nz = vol.dims
    if (nz, ny, nx) != (d, h, w):
        raise ValueError(f"volume dims {vol.dims} do not match network input {(w, h, d)}")


def predict_tre(net: Network, fixed: Volume3D, moving_resampled: Volume3D) -> float:
    """Eval-mode TRE estimate (mm) for one fixed/moving pair."""
    return float(predict_tre_batch(net, fixed, [moving_resampled])[0])


def predict_tre_batch(net: Network, fixed: Volume3D, movings) -> np.ndarray:
    """Eval-mode TRE estimates for several resampled movings of one fixed.

    Returns a float64 array of length len(movings). Inference is read-only;
    a lock serializes concurrent callers so results never race on shared
    scratch buffers.
    """
    _check_input_grid(net, fixed)
    fnorm = normalize_intensities(fixed.data)
    n = len(movings)
    c, d, h, w = net.spec.input_shape
    x = np.empty((2, n, d, h, w), dtype=np.float32)
    for i, mv in enumerate(movings):
        if not mv.same_geometry(fixed):
            raise ValueError("moving volume grid does not match fixed volume")
        x[0, i] = fnorm
        x[1, i] = normalize_intensities(mv.data)
    with _EVAL_LOCK:
        out = net.forward(x, training=False)
    return np.asarray(out[0], dtype=np.float64)
