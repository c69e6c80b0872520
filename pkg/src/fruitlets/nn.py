"""Parameter management, layer helpers, and checkpoint serialisation.

A :class:`ParameterStore` owns every trainable tensor of a model, keyed by
a dotted name.  Creation order is fixed by the model builder, and all
initial values come from a single seeded generator, so a store is a pure
function of its seed.  Checkpoints round-trip the raw float64 bytes, so a
save/load cycle is bit-exact.
"""

import base64
import json
import os

import numpy as np

from .tensor import Tensor, relu

CHECKPOINT_FORMAT = "fruitlets-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is missing fields, mis-versioned, or shape-incompatible."""


class ParameterStore:
    """Ordered, named collection of trainable tensors.

    Args:
        seed: seed for the generator used by :meth:`xavier`; the sequence
            of parameter creations then fully determines every value.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def xavier(self, name: str, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
        """Create a parameter with Xavier-uniform entries U(-a, a), a = sqrt(6/(fan_in+fan_out))."""
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = self._rng.uniform(-limit, limit, size=shape)
        return self._register(name, data)

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.zeros(shape))

    def full(self, name: str, shape: tuple, value: float) -> Tensor:
        return self._register(name, np.full(shape, float(value)))

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    # -- checkpoints -----------------------------------------------------

    def state_dict(self) -> dict:
        params = {}
        for name, p in self._params.items():
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            params[name] = {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.tobytes()).decode("ascii"),
            }
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "params": params,
        }

    def load_state_dict(self, state: dict):
        """Copy checkpoint values into the existing parameters, in place.

        In-place copy keeps layer objects pointing at live tensors.  Names
        and shapes must match the store exactly.
        """
        if state.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"not a parameter checkpoint: format={state.get('format')!r}")
        if state.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {state.get('version')!r}")
        params = state.get("params")
        if not isinstance(params, dict):
            raise CheckpointError("checkpoint has no params table")
        if set(params) != set(self._params):
            missing = set(self._params) - set(params)
            extra = set(params) - set(self._params)
            raise CheckpointError(f"parameter names differ (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, entry in params.items():
            target = self._params[name]
            shape = tuple(entry["shape"])
            if shape != target.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {shape} vs model {target.data.shape}"
                )
            raw = base64.b64decode(entry["data"])
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            target.data[...] = arr
        # adopt the recorded seed: after a load the store's contents are
        # those of the saved store, whatever seed this one started from
        if "seed" in state:
            self.seed = state["seed"]

    def save(self, path: str):
        blob = json.dumps(self.state_dict(), indent=1, sort_keys=True)
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(blob)
        os.replace(tmp, path)

    def load(self, path: str):
        with open(path, encoding="utf-8") as fh:
            try:
                state = json.load(fh)
            except json.JSONDecodeError as err:
                raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
        self.load_state_dict(state)


class Linear:
    """Affine map x @ W + b with Xavier-initialised W and zero b."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int):
        self.w = store.xavier(f"{name}.weight", (in_dim, out_dim), in_dim, out_dim)
        self.b = store.zeros(f"{name}.bias", (out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Conv2d:
    """Conv layer over (N, C, H, W) inputs; bias is per output channel."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
    ):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.w = store.xavier(f"{name}.weight", (out_ch, in_ch, kernel, kernel), fan_in, fan_out)
        self.b = store.zeros(f"{name}.bias", (out_ch,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import conv2d

        out = conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return out + self.b.reshape((1, self.b.shape[0], 1, 1))


class MLP:
    """Stack of Linear layers with ReLU between (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, dims: list):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
