"""Dense encoders and generator, plus the straight-through code substitution.

Images are flattened row-major; all maps operate on batches ``[B, ...]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import ndcore as nd
from .codebook import Codebook, init_codebook, nearest_codes
from .etf import EtfClassifier, build_etf
from .ndcore import DimensionError, Tensor


@dataclass
class Dims:
    H: int = 32
    W: int = 32
    L: int = 64
    m: int = 16
    N: int = 16
    encoder_hidden: tuple = (256, 128)
    generator_hidden: tuple = (128, 256)

    @property
    def pixels(self) -> int:
        return self.H * self.W

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["generator_hidden"] = list(self.generator_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Dims":
        d = dict(d)
        d["encoder_hidden"] = tuple(d.get("encoder_hidden", cls.encoder_hidden))
        d["generator_hidden"] = tuple(d.get("generator_hidden", cls.generator_hidden))
        return cls(**d)


def layer_shapes(dims: Dims, learnable_classifier: bool = False) -> Dict[str, tuple]:
    """Parameter name -> shape; a pure function of the dims record."""
    shapes: Dict[str, tuple] = {}

    def mlp(prefix, fan_in, widths):
        for i, w in enumerate(widths):
            shapes[f"{prefix}.{i}.w"] = (fan_in, w)
            shapes[f"{prefix}.{i}.b"] = (w,)
            fan_in = w
        return fan_in

    top = mlp("input_enc", dims.pixels, dims.encoder_hidden)
    shapes["input_enc.latent.w"] = (top, dims.L)
    shapes["input_enc.latent.b"] = (dims.L,)
    shapes["input_enc.prob.w"] = (top, dims.m)
    shapes["input_enc.prob.b"] = (dims.m,)

    top = mlp("pair_enc", 2 * dims.pixels, dims.encoder_hidden)
    shapes["pair_enc.out.w"] = (top, dims.m)
    shapes["pair_enc.out.b"] = (dims.m,)

    top = mlp("generator", dims.L + dims.m, dims.generator_hidden)
    shapes["generator.out.w"] = (top, dims.pixels)
    shapes["generator.out.b"] = (dims.pixels,)

    if learnable_classifier:
        shapes["classifier"] = (dims.m, dims.N)
    return shapes


# layers followed by a ReLU get the He bound; linear heads the variance-preserving one
_LINEAR_HEADS = ("input_enc.prob.w", "pair_enc.out.w", "generator.out.w", "classifier")


def init_params(dims: Dims, seed: int, learnable_classifier: bool = False) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in layer_shapes(dims, learnable_classifier).items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0]
            gain = 3.0 if name in _LINEAR_HEADS else 6.0
            bound = math.sqrt(gain / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


@dataclass
class DmmModel:
    dims: Dims
    params: Dict[str, Tensor]
    codebook: Codebook
    etf: EtfClassifier
    seed: int = 0
    learnable_classifier: bool = False

    @property
    def dtype(self):
        return self.params["generator.out.w"].data.dtype

    def astype(self, dtype) -> "DmmModel":
        """Cast every array in place (float64 copies back the gradient oracles)."""
        for t in (*self.params.values(), self.codebook.codes, self.etf.M):
            t.data = t.data.astype(dtype)
        return self

    @property
    def classifier(self) -> Tensor:
        return self.params["classifier"] if self.learnable_classifier else self.etf.M

    def trainable(self, fixed_codebook: bool = False) -> Dict[str, Tensor]:
        out = dict(self.params)
        if not fixed_codebook:
            out["codebook"] = self.codebook.codes
        return out


def build_model(dims: Dims, seed: int = 0, kappa: float = 0.99,
                learnable_classifier: bool = False) -> DmmModel:
    ss = np.random.SeedSequence(seed)
    s_params, s_code, s_etf = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    return DmmModel(
        dims=dims,
        params=init_params(dims, s_params, learnable_classifier),
        codebook=init_codebook(dims.N, dims.m, kappa=kappa, seed=s_code),
        etf=build_etf(dims.N, dims.m, seed=s_etf),
        seed=seed,
        learnable_classifier=learnable_classifier,
    )


def _dense(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return nd.bias_add(nd.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _mlp(x: Tensor, params, prefix: str, depth: int) -> Tensor:
    for i in range(depth):
        x = nd.relu(_dense(x, params, f"{prefix}.{i}"))
    return x


def _flatten(images, dims: Dims, what: str, dtype=np.float32) -> np.ndarray:
    arr = np.asarray(images, dtype=dtype)
    if arr.shape[-2:] == (dims.H, dims.W):
        arr = arr.reshape(-1, dims.pixels)
    elif arr.ndim in (1, 2) and arr.shape[-1] == dims.pixels:
        arr = arr.reshape(-1, dims.pixels)
    else:
        raise DimensionError(f"{what} of shape {arr.shape} does not match {dims.H}x{dims.W}")
    return arr


def encode_input(x, model: DmmModel) -> tuple[Tensor, Tensor]:
    """Shared input embedding: generator latent ``l`` and probability feature ``h``."""
    dims = model.dims
    xt = Tensor(_flatten(x, dims, "input", model.dtype))
    trunk = _mlp(xt, model.params, "input_enc", len(dims.encoder_hidden))
    latent = nd.relu(_dense(trunk, model.params, "input_enc.latent"))
    h = _dense(trunk, model.params, "input_enc.prob")
    return latent, h


def encode_pair(x, y, model: DmmModel) -> Tensor:
    dims = model.dims
    xs = _flatten(x, dims, "input", model.dtype)
    ys = _flatten(y, dims, "label", model.dtype)
    if xs.shape[0] != ys.shape[0]:
        raise DimensionError(f"batch sizes differ: {xs.shape[0]} inputs, {ys.shape[0]} labels")
    xy = Tensor(np.concatenate([xs, ys], axis=1))
    trunk = _mlp(xy, model.params, "pair_enc", len(dims.encoder_hidden))
    return _dense(trunk, model.params, "pair_enc.out")


def straight_through(z: Tensor, cb: Codebook) -> tuple[Tensor, np.ndarray]:
    """Quantize each row of ``z`` to its nearest code.

    The forward value is the code itself; the backward pass hands the code's
    gradient to ``z`` unchanged and nothing to the codebook.
    """
    idx = nearest_codes(z.data, cb)
    codes = cb.codes.data[:, idx].T
    return nd.straight_through(z, codes), idx


def generate(latent: Tensor, code, model: DmmModel) -> Tensor:
    """Sigmoid mask estimate ``[B, H*W]`` decoded from ``concat(l, code)``."""
    dims = model.dims
    if not isinstance(code, Tensor):
        arr = np.asarray(code, dtype=model.dtype)
        if arr.size % dims.m:
            raise DimensionError(f"code of shape {arr.shape} is not a multiple of m={dims.m}")
        code = Tensor(arr.reshape(-1, dims.m))
    if latent.data.ndim != 2 or latent.shape[1] != dims.L:
        raise DimensionError(f"latent shape {latent.shape} != [B, {dims.L}]")
    if code.data.ndim != 2 or code.shape[1] != dims.m or code.shape[0] != latent.shape[0]:
        raise DimensionError(f"code shape {code.shape} incompatible with latent {latent.shape}")
    hidden = _mlp(nd.concat([latent, code], axis=1), model.params, "generator",
                  len(dims.generator_hidden))
    return nd.sigmoid(_dense(hidden, model.params, "generator.out"))


def parameter_count(model: DmmModel) -> int:
    return int(sum(t.size for t in model.params.values()))


def snapshot(model: DmmModel) -> Dict[str, np.ndarray]:
    """Copy of all trainable state, for comparisons in tests."""
    out = {k: v.data.copy() for k, v in model.params.items()}
    out["codebook"] = model.codebook.codes.data.copy()
    return out


def zero_grads(model: DmmModel, extra: Optional[list] = None) -> None:
    for t in model.params.values():
        t.grad = None
    model.codebook.codes.grad = None
    model.etf.M.grad = None
    for t in extra or ():
        t.grad = None

