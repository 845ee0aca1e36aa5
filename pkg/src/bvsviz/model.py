"""Compact residual CNN used as the slice classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, conv2d, dense, flatten, get_dtype, global_avg_pool, max_pool2d, relu

N_CLASSES = 3


@dataclass
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int


@dataclass
class Model:
    """Stem conv -> max pool -> three residual stages -> global average pool -> dense head.

    Stage 1 keeps resolution; stages 2 and 3 halve it with a strided conv and a
    1x1 strided projection on the skip path. There is no normalization layer.
    """

    crop_size: int
    channels_base: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def convs(self) -> list[ConvSpec]:
        c = self.channels_base
        return [
            ConvSpec("stem", 1, c, 3, 1, 1),
            ConvSpec("s1.conv1", c, c, 3, 1, 1),
            ConvSpec("s1.conv2", c, c, 3, 1, 1),
            ConvSpec("s2.conv1", c, 2 * c, 3, 2, 1),
            ConvSpec("s2.conv2", 2 * c, 2 * c, 3, 1, 1),
            ConvSpec("s2.proj", c, 2 * c, 1, 2, 0),
            ConvSpec("s3.conv1", 2 * c, 4 * c, 3, 2, 1),
            ConvSpec("s3.conv2", 4 * c, 4 * c, 3, 1, 1),
            ConvSpec("s3.proj", 2 * c, 4 * c, 1, 2, 0),
        ]

    def descriptor(self) -> list[str]:
        """One text line per layer; stored in checkpoints."""
        lines = [f"conv {s.name} {s.out_ch}x{s.in_ch}x{s.kernel}x{s.kernel} stride={s.stride} pad={s.padding}"
                 for s in self.convs]
        lines.insert(1, "maxpool 2x2")
        lines.append("global_avg_pool")
        lines.append(f"dense head {N_CLASSES}x{4 * self.channels_base}")
        return lines

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for s in self.convs:
            shapes[f"{s.name}.w"] = (s.out_ch, s.in_ch, s.kernel, s.kernel)
            shapes[f"{s.name}.b"] = (s.out_ch,)
        shapes["head.w"] = (N_CLASSES, 4 * self.channels_base)
        shapes["head.b"] = (N_CLASSES,)
        return shapes

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in self.param_shapes()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _conv(self, x: Tensor, name: str, spec: dict[str, ConvSpec]) -> Tensor:
        s = spec[name]
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=s.stride, padding=s.padding)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"model expects input of shape [N,1,H,W], got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"spatial extents must be multiples of 8, got {x.shape[2:]}")
        spec = {s.name: s for s in self.convs}
        h = max_pool2d(relu(self._conv(x, "stem", spec)))
        h = relu(h + self._conv(relu(self._conv(h, "s1.conv1", spec)), "s1.conv2", spec))
        for stage in ("s2", "s3"):
            branch = self._conv(relu(self._conv(h, f"{stage}.conv1", spec)), f"{stage}.conv2", spec)
            h = relu(branch + self._conv(h, f"{stage}.proj", spec))
        return dense(flatten(global_avg_pool(h)), self.params["head.w"], self.params["head.b"])

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        """Logits for an (N,1,H,W) array without recording gradients for the caller."""
        outs = []
        for i in range(0, x.shape[0], batch):
            outs.append(self.forward(Tensor(x[i:i + batch])).data)
        return np.concatenate(outs, axis=0)


def build_model(crop_size: int, channels_base: int = 8, seed: int = 0) -> Model:
    """Residual classifier for [N,1,crop_size,crop_size] input with He fan-in initialization."""
    if crop_size < 16 or crop_size % 8:
        raise ValueError(f"unsupported crop size {crop_size}: must be a multiple of 8 and >= 16")
    if channels_base < 4:
        raise ValueError("channels_base must be >= 4")
    model = Model(crop_size, channels_base)
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    for name, shape in model.param_shapes().items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            if name.endswith("conv2.w"):
                # keeps the residual sum near identity at initialization
                arr *= 0.5
        model.params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return model
