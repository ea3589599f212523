"""Differentiable denoiser victims: a classical spectral gate and two tiny nets.

Every model maps waveforms to equal-length waveforms and exposes both a plain
forward (numpy in, numpy out) and a tape-recorded forward for gradient-based
attacks. TF-domain models output a real ratio mask applied to the input
spectrogram; the time-domain model is a small residual convolution stack.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffdsp
from .autodiff import DiffValue, Tape
from .dsp import PIPELINE_RATE, StftParams, Waveform
from .metrics import stoi
from .optim import Adam

WEIGHT_MAGIC = b"MADW"
WEIGHT_VERSION = 1


class WeightFormatError(ValueError):
    pass


class ChecksumMismatchError(WeightFormatError):
    pass


class WeightVersionError(WeightFormatError):
    pass


class WeightShapeError(WeightFormatError):
    pass


@dataclass
class ModelWeights:
    model_name: str
    version: int
    grids: dict[str, np.ndarray]
    info: dict = field(default_factory=dict)  # not serialized


@dataclass(frozen=True)
class RatioMask:
    """Per-bin multiplier grid; enhanced spectrum = input spectrum * values."""

    values: np.ndarray


class DenoiserModel:
    """Interface: deterministic, length-preserving, differentiable forward."""

    name: str = "base"
    version: int = 1
    domain: str = "time"
    trainable: bool = False

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}

    def parameters(self) -> dict[str, np.ndarray]:
        return self._params

    def forward_diff(
        self, tape: Tape, x: DiffValue, weights: dict[str, DiffValue] | None = None
    ) -> DiffValue:
        raise NotImplementedError

    def forward(self, wave: Waveform) -> Waveform:
        if wave.sample_rate != PIPELINE_RATE:
            raise ValueError(f"expected {PIPELINE_RATE} Hz input")
        tape = Tape()
        out = self.forward_diff(tape, tape.constant(wave.samples))
        return Waveform(out.data, wave.sample_rate)

    def get_weights(self) -> ModelWeights:
        return ModelWeights(
            self.name, self.version, {k: v.copy() for k, v in self._params.items()}
        )

    def apply_weights(self, weights: ModelWeights) -> None:
        if weights.model_name != self.name:
            raise WeightShapeError(
                f"weights are for model '{weights.model_name}', not '{self.name}'"
            )
        for key, grid in self._params.items():
            if key not in weights.grids:
                raise WeightShapeError(f"missing grid '{key}'")
            if weights.grids[key].shape != grid.shape:
                raise WeightShapeError(
                    f"grid '{key}': expected shape {grid.shape}, "
                    f"file has {weights.grids[key].shape}"
                )
        self._params = {k: weights.grids[k].copy() for k in self._params}

    def _weight_nodes(
        self, tape: Tape, weights: dict[str, DiffValue] | None
    ) -> dict[str, DiffValue]:
        if weights is not None:
            return weights
        return {k: tape.constant(v) for k, v in self._params.items()}


def forward(model: DenoiserModel, x: Waveform) -> Waveform:
    return model.forward(x)


# ---------------------------------------------------------------------------
# spectral gate (classical, training-free)
# ---------------------------------------------------------------------------


class SpectralGateModel(DenoiserModel):
    """Soft spectral subtraction against a per-bin noise-floor percentile."""

    name = "spectral_gate"
    domain = "time-frequency"
    trainable = False

    def __init__(
        self,
        oversubtraction: float = 4.0,
        floor: float = 0.15,
        noise_percentile: float = 10.0,
        stft_params: StftParams = StftParams(),
    ):
        super().__init__()
        if oversubtraction < 1.0:
            raise ValueError("oversubtraction must be >= 1")
        if not 0.0 < floor < 1.0:
            raise ValueError("floor must lie in (0, 1)")
        self.oversubtraction = oversubtraction
        self.floor = floor
        self.noise_percentile = noise_percentile
        self.stft_params = stft_params

    def mask_diff(self, tape: Tape, x: DiffValue) -> tuple[DiffValue, DiffValue, DiffValue]:
        re, im = diffdsp.stft_pair(x, self.stft_params)
        power = ad.add(ad.add(ad.square(re), ad.square(im)), tape.constant(1e-20))
        noise = ad.col_percentile(power, self.noise_percentile)
        ratio = ad.div(ad.tile_rows(noise, power.data.shape[0]), power)
        q = ad.clamp(
            ad.add(ad.mul(ratio, -self.oversubtraction), 1.0), lo=self.floor
        )
        return q, re, im

    def ratio_mask(self, wave: Waveform) -> RatioMask:
        tape = Tape()
        q, _, _ = self.mask_diff(tape, tape.constant(wave.samples))
        return RatioMask(q.data.copy())

    def forward_diff(self, tape, x, weights=None):
        q, re, im = self.mask_diff(tape, x)
        return diffdsp.istft_wave(
            ad.mul(q, re), ad.mul(q, im), self.stft_params, x.data.shape[0]
        )


def spectral_gate_model(
    oversubtraction: float = 4.0, floor: float = 0.15
) -> SpectralGateModel:
    return SpectralGateModel(oversubtraction, floor)


# ---------------------------------------------------------------------------
# tiny mask network (TF-domain)
# ---------------------------------------------------------------------------


class TinyMaskNet(DenoiserModel):
    """Two sigmoid dense layers on log-magnitude frames with +/-2 frame context."""

    name = "tiny_mask"
    domain = "time-frequency"
    trainable = True
    context = 2
    hidden = 14

    def __init__(self, seed: int = 0, stft_params: StftParams = StftParams()):
        super().__init__()
        self.seed = seed
        self.stft_params = stft_params
        bins = stft_params.bins
        feat = (2 * self.context + 1) * bins
        rng = np.random.default_rng(seed)
        self._params = {
            "w1": rng.normal(0.0, feat**-0.5, (feat, self.hidden)),
            "b1": np.zeros(self.hidden),
            "w2": rng.normal(0.0, self.hidden**-0.5, (self.hidden, bins)),
            "b2": np.zeros(bins),
        }

    def forward_diff(self, tape, x, weights=None):
        w = self._weight_nodes(tape, weights)
        re, im = diffdsp.stft_pair(x, self.stft_params)
        power = ad.add(ad.add(ad.square(re), ad.square(im)), tape.constant(1e-10))
        logmag = ad.log10(power)
        frames = logmag.data.shape[0]
        base = np.arange(frames)
        parts = [
            ad.take_rows(logmag, np.clip(base + off, 0, frames - 1))
            for off in range(-self.context, self.context + 1)
        ]
        feats = ad.concat(parts, axis=1)
        hidden = ad.sigmoid(ad.add_rowvec(ad.matmul(feats, w["w1"]), w["b1"]))
        q = ad.sigmoid(ad.add_rowvec(ad.matmul(hidden, w["w2"]), w["b2"]))
        return diffdsp.istft_wave(
            ad.mul(q, re), ad.mul(q, im), self.stft_params, x.data.shape[0]
        )

    def ratio_mask(self, wave: Waveform) -> RatioMask:
        tape = Tape()
        re, im = diffdsp.stft_pair(tape.constant(wave.samples), self.stft_params)
        power = ad.add(ad.add(ad.square(re), ad.square(im)), tape.constant(1e-10))
        logmag = ad.log10(power)
        frames = logmag.data.shape[0]
        base = np.arange(frames)
        w = self._weight_nodes(tape, None)
        parts = [
            ad.take_rows(logmag, np.clip(base + off, 0, frames - 1))
            for off in range(-self.context, self.context + 1)
        ]
        feats = ad.concat(parts, axis=1)
        hidden = ad.sigmoid(ad.add_rowvec(ad.matmul(feats, w["w1"]), w["b1"]))
        q = ad.sigmoid(ad.add_rowvec(ad.matmul(hidden, w["w2"]), w["b2"]))
        return RatioMask(q.data.copy())


def tiny_mask_net(seed: int = 0) -> TinyMaskNet:
    return TinyMaskNet(seed)


# ---------------------------------------------------------------------------
# tiny residual convolution network (time-domain)
# ---------------------------------------------------------------------------


class TinyConvNet(DenoiserModel):
    """Three kernel-33 convolution layers with tanh and a residual connection.

    The final layer is zero-initialized, so an untrained net is the identity.
    """

    name = "tiny_conv"
    domain = "time"
    trainable = True
    kernel = 33
    channels = 16

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        rng = np.random.default_rng(seed)
        k, c = self.kernel, self.channels
        self._params = {
            "w1": rng.normal(0.0, k**-0.5, (k, c)),
            "b1": np.zeros(c),
            "w2": rng.normal(0.0, (k * c) ** -0.5, (k * c, c)),
            "b2": np.zeros(c),
            "w3": np.zeros((k * c, 1)),
            "b3": np.zeros(1),
        }

    def forward_diff(self, tape, x, weights=None):
        w = self._weight_nodes(tape, weights)
        half = self.kernel // 2

        def conv_layer(inp, kernel, bias):
            cols = ad.sliding_rows(ad.pad_rows(inp, half, half), self.kernel)
            return ad.add_rowvec(ad.matmul(cols, kernel), bias)

        h = ad.reshape(x, (x.data.shape[0], 1))
        h = ad.tanh(conv_layer(h, w["w1"], w["b1"]))
        h = ad.tanh(conv_layer(h, w["w2"], w["b2"]))
        resid = conv_layer(h, w["w3"], w["b3"])
        return ad.add(x, ad.reshape(resid, (x.data.shape[0],)))


def tiny_conv_net(seed: int = 0) -> TinyConvNet:
    return TinyConvNet(seed)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------


def save_weights(weights: ModelWeights, path) -> None:
    """Versioned binary: header, named float64 grids, trailing SHA-256."""
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<I", WEIGHT_VERSION)
    name = weights.model_name.encode()
    out += struct.pack("<H", len(name)) + name
    out += struct.pack("<I", len(weights.grids))
    for key, grid in weights.grids.items():
        kb = key.encode()
        out += struct.pack("<H", len(kb)) + kb
        out += struct.pack("<B", grid.ndim)
        for dim in grid.shape:
            out += struct.pack("<Q", dim)
        out += np.ascontiguousarray(grid, dtype="<f8").tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 42 or blob[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: not a weight file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    pos = 4
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != WEIGHT_VERSION:
        raise WeightVersionError(f"{path}: format version {version}, expected {WEIGHT_VERSION}")
    (name_len,) = struct.unpack_from("<H", body, pos)
    pos += 2
    name = body[pos : pos + name_len].decode()
    pos += name_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    grids: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        key = body[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            shape.append(dim)
        size = int(np.prod(shape)) if shape else 1
        grid = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += size * 8
        grids[key] = grid.astype(np.float64)
    return ModelWeights(name, version, grids)


_MODEL_BUILDERS = {
    "spectral_gate": lambda: SpectralGateModel(),
    "tiny_mask": lambda: TinyMaskNet(),
    "tiny_conv": lambda: TinyConvNet(),
}


def model_from_weights(weights: ModelWeights) -> DenoiserModel:
    if weights.model_name not in _MODEL_BUILDERS:
        raise WeightFormatError(f"unknown model '{weights.model_name}'")
    model = _MODEL_BUILDERS[weights.model_name]()
    model.apply_weights(weights)
    return model


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------


def train_toy(
    model: DenoiserModel,
    seeds: int = 0,
    steps: int = 1500,
    lr: float = 5e-3,
    clip_seconds: float = 1.0,
    snr_range: tuple[float, float] = (2.0, 8.0),
) -> ModelWeights:
    """Supervised denoising on synthetic (clean, clean+noise) pairs.

    Minimizes waveform MSE with Adam; mutates the model in place and returns
    a weight snapshot whose info records the held-out stoi improvement.
    """
    from .dsp import mix_at_snr, synth_test_signal

    if not model.trainable:
        raise ValueError(f"model '{model.name}' is not trainable")
    adam = Adam(lr)
    for step in range(steps):
        rng = np.random.default_rng([seeds, step])
        clean = synth_test_signal(
            "harmonic-voice", clip_seconds, int(rng.integers(2**31))
        )
        kind = "white" if step % 2 == 0 else "babble"
        noise = synth_test_signal(kind, clip_seconds, int(rng.integers(2**31)))
        snr = float(rng.uniform(*snr_range))
        x, _ = mix_at_snr(clean, [noise], snr)

        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in model.parameters().items()}
        out = model.forward_diff(tape, tape.constant(x.samples), leaves)
        loss = ad.mean_all(ad.square(ad.sub(out, tape.constant(clean.samples))))
        if not np.isfinite(loss.data):
            raise RuntimeError(f"training diverged at step {step}: loss={loss.data}")
        tape.backward(loss)
        for key, leaf in leaves.items():
            if leaf.grad is not None:
                model.parameters()[key] -= adam.update(key, leaf.grad)

    improvements = []
    for i in range(4):
        rng = np.random.default_rng([seeds, 10_000_000 + i])
        clean = synth_test_signal(
            "harmonic-voice", clip_seconds, int(rng.integers(2**31))
        )
        noise = synth_test_signal("white", clip_seconds, int(rng.integers(2**31)))
        x, _ = mix_at_snr(clean, [noise], 5.0)
        improvements.append(stoi(clean, model.forward(x)) - stoi(clean, x))

    snapshot = model.get_weights()
    snapshot.info["val_stoi_improvement"] = float(np.mean(improvements))
    return snapshot
