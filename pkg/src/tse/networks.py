"""Speaker embedder and the CNN-LSTM mask-estimation separator.

The separator is eight dilated conv layers (batch norm + ReLU each), an
LSTM whose forget-gate wiring is selectable, and two fully connected
layers ending in a sigmoid mask, one value per time-frequency bin. The
embedder is a three-layer LSTM over log-Mel frames whose last hidden state
is projected and L2-normalized into a fixed-size speaker embedding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .cells import GateWiring, LstmParams, run_sequence

CHECKPOINT_FORMAT = 1

# (kernel (freq, time), dilation (freq, time)); filter counts are attached
# by SeparatorConfig. The 5x5 layers dilate along frequency in powers of 2.
CONV_SPECS = (
    ((1, 7), (1, 1)),
    ((7, 1), (1, 1)),
    ((5, 5), (1, 1)),
    ((5, 5), (2, 1)),
    ((5, 5), (4, 1)),
    ((5, 5), (8, 1)),
    ((5, 5), (16, 1)),
    ((1, 1), (1, 1)),
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class SeparatorConfig:
    fft_size: int = 512
    frame_length: int = 512
    frame_shift: int = 256
    sample_rate: int = 16000
    conv_filters: int = 64
    conv_out_channels: int = 8
    lstm_hidden: int = 600
    fc1_size: int = 514
    embed_dim: int = 256
    wiring: str = "standard"
    dtype: str = "float64"

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.fft_size, self.frame_length, self.frame_shift,
                              window="sqrt-hann", sample_rate=self.sample_rate)

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def feature_size(self) -> int:
        return self.conv_out_channels * self.num_bins

    @property
    def gate_wiring(self) -> GateWiring:
        return GateWiring.parse(self.wiring)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def scaled(self, width_factor: float) -> "SeparatorConfig":
        """Shrink trainable widths by a common factor (desk-scale runs)."""
        if width_factor <= 0:
            raise ValueError("width_factor must be positive")
        return replace(
            self,
            conv_filters=max(1, round(self.conv_filters * width_factor)),
            lstm_hidden=max(4, round(self.lstm_hidden * width_factor)),
            fc1_size=max(4, round(self.fc1_size * width_factor)))

    def conv_channels(self) -> list[tuple[int, int]]:
        """(in, out) channel pairs for the eight conv layers."""
        f = self.conv_filters
        sizes = [1] + [f] * 7 + [self.conv_out_channels]
        return list(zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class EmbedderConfig:
    fft_size: int = 512
    frame_length: int = 400
    frame_shift: int = 160
    sample_rate: int = 16000
    n_mels: int = 40
    hidden: int = 768
    n_layers: int = 3
    embed_dim: int = 256
    dtype: str = "float64"

    @property
    def stft(self) -> dsp.StftConfig:
        return dsp.StftConfig(self.fft_size, self.frame_length, self.frame_shift,
                              window="hann", sample_rate=self.sample_rate)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @classmethod
    def desk(cls, sample_rate: int = 8000) -> "EmbedderConfig":
        return cls(fft_size=256, frame_length=200, frame_shift=160,
                   sample_rate=sample_rate, n_mels=20, hidden=64, embed_dim=32)


class ConvLayer:
    """One dilated conv with per-channel batch norm and ReLU."""

    def __init__(self, rng, in_channels, out_channels, kernel, dilation, dtype):
        kh, kw = kernel
        bound = 1.0 / np.sqrt(in_channels * kh * kw)
        self.kernel = ad.parameter(
            rng.uniform(-bound, bound, (out_channels, in_channels, kh, kw)), dtype=dtype)
        self.gamma = ad.parameter(np.ones((out_channels, 1, 1)), dtype=dtype)
        self.beta = ad.parameter(np.zeros((out_channels, 1, 1)), dtype=dtype)
        self.running_mean = np.zeros((out_channels, 1, 1), dtype=dtype)
        self.running_var = np.ones((out_channels, 1, 1), dtype=dtype)
        self.dilation = dilation

    def parameters(self):
        return [self.kernel, self.gamma, self.beta]

    def __call__(self, x: Tensor, train: bool, update_stats: bool) -> Tensor:
        out = ad.conv2d(x, self.kernel, dilation=self.dilation)
        c, h, w = out.shape
        if train:
            mean = ad.tensor_mean(out, axis=(1, 2), keepdims=True)
            centered = ad.sub(out, ad.expand(mean, out.shape))
            var = ad.tensor_mean(ad.mul(centered, centered), axis=(1, 2), keepdims=True)
            if update_stats:
                self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean.data
                self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var.data
        else:
            mean = ad.constant(self.running_mean)
            centered = ad.sub(out, ad.expand(mean, out.shape))
            var = ad.constant(self.running_var)
        inv_std = ad.power(ad.add(var, BN_EPS), -0.5)
        normed = ad.mul(centered, ad.expand(inv_std, out.shape))
        scaled = ad.add(ad.mul(normed, ad.expand(self.gamma, out.shape)),
                        ad.expand(self.beta, out.shape))
        return ad.relu(scaled)


class SeparatorModel:
    """Mask estimator per the conv/LSTM/FC layout above."""

    def __init__(self, config: SeparatorConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 0x5E9A])
        dtype = config.np_dtype
        self.conv_layers = [
            ConvLayer(rng, cin, cout, kernel, dilation, dtype)
            for (cin, cout), (kernel, dilation) in zip(config.conv_channels(), CONV_SPECS)]
        self.lstm = LstmParams.init(rng, config.lstm_hidden, config.feature_size,
                                    config.embed_dim, config.gate_wiring, dtype=dtype)
        bins = config.num_bins

        def linear(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return (ad.parameter(rng.uniform(-bound, bound, (rows, cols)), dtype=dtype),
                    ad.parameter(np.zeros((rows, 1)), dtype=dtype))

        self.fc1_w, self.fc1_b = linear(config.fc1_size, config.lstm_hidden)
        self.fc2_w, self.fc2_b = linear(bins, config.fc1_size)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.conv_layers:
            params.extend(layer.parameters())
        params.extend(self.lstm.parameters())
        params.extend([self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b])
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.conv_layers, start=1):
            named[f"conv{i}.kernel"] = layer.kernel
            named[f"conv{i}.gamma"] = layer.gamma
            named[f"conv{i}.beta"] = layer.beta
        named.update(self.lstm.named_parameters("lstm."))
        named.update({"fc1.w": self.fc1_w, "fc1.b": self.fc1_b,
                      "fc2.w": self.fc2_w, "fc2.b": self.fc2_b})
        return named

    def parameter_census(self) -> dict[str, tuple]:
        return {name: tuple(t.shape) for name, t in self.named_parameters().items()}

    def running_stats(self) -> dict[str, np.ndarray]:
        stats = {}
        for i, layer in enumerate(self.conv_layers, start=1):
            stats[f"conv{i}.running_mean"] = layer.running_mean
            stats[f"conv{i}.running_var"] = layer.running_var
        return stats


def extract_features(mixture_mag, model: SeparatorModel, train: bool = False,
                     update_stats: bool | None = None) -> Tensor:
    """Conv stack over a (bins, frames) magnitude spectrogram, flattened
    channel-major to one (channels * bins, frames) feature matrix."""
    cfg = model.config
    if not isinstance(mixture_mag, Tensor):
        mixture_mag = ad.constant(np.asarray(mixture_mag), dtype=cfg.np_dtype)
    bins, frames = mixture_mag.shape
    if bins != cfg.num_bins:
        raise ad.ShapeError(f"expected {cfg.num_bins} frequency bins, got {bins}")
    if update_stats is None:
        update_stats = train
    x = ad.reshape(mixture_mag, (1, bins, frames))
    for layer in model.conv_layers:
        x = layer(x, train, update_stats)
    return ad.reshape(x, (cfg.feature_size, frames))


def estimate_mask(features: Tensor, embedding, model: SeparatorModel) -> Tensor:
    """LSTM + FC1(ReLU) + FC2(sigmoid) over per-frame features; the
    embedding conditions every step. Output in (0, 1), (bins, frames)."""
    cfg = model.config
    if not isinstance(embedding, Tensor):
        embedding = ad.constant(np.asarray(embedding).reshape(-1, 1), dtype=cfg.np_dtype)
    if embedding.shape != (cfg.embed_dim, 1):
        raise ad.ShapeError(
            f"embedding dimension mismatch: expected {(cfg.embed_dim, 1)}, got {embedding.shape}")
    hidden = run_sequence(model.lstm, features, embedding)
    frames = hidden.shape[1]

    def affine(w, b, x):
        return ad.add(ad.matmul(w, x), ad.expand(b, (b.shape[0], frames)))

    fc1 = ad.relu(affine(model.fc1_w, model.fc1_b, hidden))
    return ad.sigmoid(affine(model.fc2_w, model.fc2_b, fc1))


def separate(mixture_mag, embedding, model: SeparatorModel, train: bool = False,
             update_stats: bool | None = None) -> Tensor:
    """Full separator: magnitude spectrogram + embedding -> soft mask."""
    features = extract_features(mixture_mag, model, train, update_stats)
    return estimate_mask(features, embedding, model)


def apply_mask(mixture_spec: dsp.Spectrogram, mask: np.ndarray) -> np.ndarray:
    """Scale the mixture spectrogram by the mask (mixture phase retained)
    and synthesize the waveform."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if mask.shape != mixture_spec.bins.shape:
        raise ad.ShapeError(
            f"mask {mask.shape} does not match spectrogram {mixture_spec.bins.shape}")
    return dsp.istft(dsp.Spectrogram(mask * mixture_spec.bins, mixture_spec.config))


def masked_istft(mask: Tensor, mixture_spec: dsp.Spectrogram) -> Tensor:
    """Differentiable apply_mask: waveform as a function of the mask.

    Needs frame_length == fft_size (true for the separator front-end) and
    a COLA-satisfying window pair.
    """
    cfg = mixture_spec.config
    if cfg.frame_length != cfg.fft_size:
        raise ValueError("masked_istft requires frame_length == fft_size")
    if mask.shape != mixture_spec.bins.shape:
        raise ad.ShapeError(
            f"mask {mask.shape} does not match spectrogram {mixture_spec.bins.shape}")
    level = dsp._cola_constant(cfg)
    dtype = mask.dtype
    re = ad.mul(mask, ad.constant(mixture_spec.bins.real, dtype=dtype))
    im = ad.mul(mask, ad.constant(mixture_spec.bins.imag, dtype=dtype))
    frames = ad.irfft_columns(re, im, cfg.fft_size)
    window = np.broadcast_to(cfg.window_values()[:, None], frames.shape)
    frames = ad.mul(frames, ad.constant(window, dtype=dtype))
    return ad.mul(ad.overlap_add(frames, cfg.frame_shift), 1.0 / level)


def oracle_mask(target_spec: dsp.Spectrogram, interferer_spec: dsp.Spectrogram,
                eps: float = 1e-12) -> np.ndarray:
    """Ideal ratio mask |X_target| / (|X_target| + |X_interferer|)."""
    t = target_spec.magnitude()
    i = interferer_spec.magnitude()
    return t / (t + i + eps)


class EmbedderModel:
    """Stacked LSTM over log-Mel frames with a normalized linear projection."""

    def __init__(self, config: EmbedderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 0xE3BE])
        dtype = config.np_dtype
        self.layers = []
        feature = config.n_mels
        for _ in range(config.n_layers):
            self.layers.append(LstmParams.init(rng, config.hidden, feature, 0,
                                               GateWiring.STANDARD, dtype=dtype))
            feature = config.hidden
        bound = 1.0 / np.sqrt(config.hidden)
        self.proj_w = ad.parameter(
            rng.uniform(-bound, bound, (config.embed_dim, config.hidden)), dtype=dtype)
        self.proj_b = ad.parameter(np.zeros((config.embed_dim, 1)), dtype=dtype)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.proj_w, self.proj_b])
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            named.update(layer.named_parameters(f"lstm{i}."))
        named.update({"proj.w": self.proj_w, "proj.b": self.proj_b})
        return named

    def projection(self, log_mel_features) -> Tensor:
        """Pre-normalization projection of the last hidden state, (E, 1)."""
        if not isinstance(log_mel_features, Tensor):
            log_mel_features = ad.constant(np.asarray(log_mel_features),
                                           dtype=self.config.np_dtype)
        empty = ad.constant(np.zeros((0, 1)), dtype=log_mel_features.dtype)
        hidden = log_mel_features
        for layer in self.layers:
            hidden = run_sequence(layer, hidden, empty)
        last = ad.narrow(hidden, 1, hidden.shape[1] - 1, 1)
        return ad.add(ad.matmul(self.proj_w, last), self.proj_b)

    def embedding(self, log_mel_features) -> Tensor:
        """Unit-L2-norm speaker embedding, (E, 1)."""
        proj = self.projection(log_mel_features)
        norm = ad.power(ad.add(ad.tensor_sum(ad.mul(proj, proj)), 1e-12), -0.5)
        return ad.mul(proj, norm)


def embed(reference_wave: np.ndarray, model: EmbedderModel) -> np.ndarray:
    """Speaker embedding of a reference waveform; unit L2 norm, (E, 1)."""
    cfg = model.config
    feats = dsp.log_mel(reference_wave, cfg.stft, cfg.n_mels)
    with ad.no_grad():
        return model.embedding(feats).data.copy()


def _config_to_json(config) -> dict:
    return asdict(config)


def save_checkpoint(path, separator: SeparatorModel | None = None,
                    embedder: EmbedderModel | None = None, extra: dict | None = None):
    """Write a versioned npz container with configs and named parameters."""
    meta = {"format": CHECKPOINT_FORMAT, "extra": extra or {}}
    arrays = {}
    if separator is not None:
        meta["separator_config"] = _config_to_json(separator.config)
        for name, tensor in separator.named_parameters().items():
            arrays["sep/" + name] = tensor.data
        for name, value in separator.running_stats().items():
            arrays["sep/" + name] = value
    if embedder is not None:
        meta["embedder_config"] = _config_to_json(embedder.config)
        for name, tensor in embedder.named_parameters().items():
            arrays["emb/" + name] = tensor.data
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8), **arrays)


class CheckpointError(ValueError):
    pass


def _load_npz(path):
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in archive:
        raise CheckpointError(f"{path}: missing checkpoint metadata")
    meta = json.loads(bytes(archive["__meta__"]).decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, archive


def load_separator(path, expect_wiring: str | None = None
                   ) -> tuple[SeparatorModel, dict]:
    """Rebuild a separator (and its metadata) from a checkpoint.

    ``expect_wiring`` guards against silently evaluating a model with the
    wrong forget-gate structure.
    """
    meta, archive = _load_npz(path)
    if "separator_config" not in meta:
        raise CheckpointError(f"{path}: no separator in checkpoint")
    config = SeparatorConfig(**meta["separator_config"])
    if expect_wiring is not None and config.wiring != expect_wiring:
        raise CheckpointError(
            f"{path}: checkpoint wiring is {config.wiring!r}, expected {expect_wiring!r}")
    model = SeparatorModel(config)
    for name, tensor in model.named_parameters().items():
        stored = archive["sep/" + name]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape "
                                  f"{stored.shape}, expected {tensor.data.shape}")
        tensor.data = stored.astype(config.np_dtype)
    for i, layer in enumerate(model.conv_layers, start=1):
        layer.running_mean = archive[f"sep/conv{i}.running_mean"].astype(config.np_dtype)
        layer.running_var = archive[f"sep/conv{i}.running_var"].astype(config.np_dtype)
    return model, meta


def load_embedder(path) -> tuple[EmbedderModel, dict]:
    meta, archive = _load_npz(path)
    if "embedder_config" not in meta:
        raise CheckpointError(f"{path}: no embedder in checkpoint")
    config = EmbedderConfig(**meta["embedder_config"])
    model = EmbedderModel(config)
    for name, tensor in model.named_parameters().items():
        stored = archive["emb/" + name]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape "
                                  f"{stored.shape}, expected {tensor.data.shape}")
        tensor.data = stored.astype(config.np_dtype)
    return model, meta
