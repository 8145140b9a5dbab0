"""Training loops, optimizer, evaluation, and gradient verification.

Training is deterministic under a fixed seed: data order, initialization,
and logging all derive from the config, and log lines carry no timestamps,
so same-seed runs produce byte-identical logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import cells, data, dsp, losses, networks


class ConfigError(ValueError):
    """Invalid training configuration."""


class NumericalError(RuntimeError):
    """Loss or gradients became non-finite."""


LOSSES = ("sisnr", "plc")
WIRINGS = ("standard", "customized")


@dataclass
class TrainConfig:
    loss: str = "sisnr"
    wiring: str = "standard"
    learning_rate: float = 0.0002
    batch_size: int = 16
    max_epochs: int = 50
    grad_clip_norm: float = 10.0
    early_stop_patience: int = 7
    width_factor: float = 1.0
    seed: int = 0
    dtype: str = "float64"
    plc_power: float = 0.3
    steps_per_epoch: int = 0  # 0 = full pass over the training set

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.wiring not in WIRINGS:
            raise ConfigError(f"wiring must be one of {WIRINGS}, got {self.wiring!r}")
        for name in ("learning_rate", "batch_size", "max_epochs",
                     "grad_clip_norm", "width_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.early_stop_patience <= self.max_epochs:
            raise ConfigError("early_stop_patience must be in [1, max_epochs]")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if not 0.0 < self.plc_power <= 1.0:
            raise ConfigError("plc_power must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with bias correction; operates on the tensors' .grad fields."""

    def __init__(self, params: list[ad.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def global_grad_norm(params: list[ad.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(params: list[ad.Tensor], max_norm: float) -> float:
    """Scale gradients so the global norm is at most max_norm.

    Returns the pre-clip norm; raises NumericalError on non-finite grads.
    """
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericalError(f"gradient norm is {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class _CachedSample:
    sample_id: str
    spec: dsp.Spectrogram
    mag: np.ndarray            # model dtype
    embedding: np.ndarray      # (E, 1) model dtype
    target_interior: np.ndarray
    target_mag: np.ndarray     # for the PLC loss
    interior: slice


def _prepare_sample(sample: data.MixtureSample, stft_cfg: dsp.StftConfig,
                    embedder: networks.EmbedderModel, dtype) -> _CachedSample:
    spec = dsp.stft(sample.mixture, stft_cfg)
    interior = dsp.interior_slice(stft_cfg, spec.num_frames)
    return _CachedSample(
        sample_id=sample.sample_id,
        spec=spec,
        mag=spec.magnitude().astype(dtype),
        embedding=networks.embed(sample.reference, embedder).astype(dtype),
        target_interior=sample.target[interior],
        target_mag=dsp.stft(sample.target, stft_cfg).magnitude().astype(dtype),
        interior=interior)


class SeparatorTrainer:
    """Adam training of a separator against a frozen embedder."""

    def __init__(self, model: networks.SeparatorModel, embedder: networks.EmbedderModel,
                 train_samples: list[data.MixtureSample],
                 val_samples: list[data.MixtureSample],
                 config: TrainConfig, log=None):
        if not train_samples or not val_samples:
            raise data.DataError("need non-empty train and val splits")
        self.model = model
        self.config = config
        self.log = log or (lambda line: None)
        self.params = model.parameters()
        self.optimizer = Adam(self.params, lr=config.learning_rate)
        self.rng = np.random.default_rng([config.seed, 0x7241])
        dtype = model.config.np_dtype
        stft_cfg = model.config.stft
        self.train_set = [_prepare_sample(s, stft_cfg, embedder, dtype) for s in train_samples]
        self.val_set = [_prepare_sample(s, stft_cfg, embedder, dtype) for s in val_samples]
        self.global_step = 0

    def _sample_loss(self, cached: _CachedSample, train: bool) -> ad.Tensor:
        mask = networks.separate(cached.mag, cached.embedding, self.model, train=train)
        if self.config.loss == "plc":
            est_mag = ad.mul(mask, ad.constant(cached.mag))
            return losses.plc_loss(est_mag, cached.target_mag, power=self.config.plc_power)
        wave = networks.masked_istft(mask, cached.spec)
        sl = cached.interior
        est = ad.narrow(wave, 0, sl.start, sl.stop - sl.start)
        return losses.si_snr_loss(est, cached.target_interior)

    def _train_batch(self, batch: list[_CachedSample]) -> tuple[float, float]:
        total = 0.0
        for cached in batch:
            loss = self._sample_loss(cached, train=True)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"loss is {value} at step {self.global_step} ({cached.sample_id})")
            total += value
            ad.backward(ad.mul(loss, 1.0 / len(batch)))
        norm = clip_gradients(self.params, self.config.grad_clip_norm)
        self.optimizer.step()
        ad.zero_grads(self.params)
        return total / len(batch), norm

    def validation_loss(self) -> float:
        total = 0.0
        with ad.no_grad():
            for cached in self.val_set:
                total += self._sample_loss(cached, train=False).item()
        return total / len(self.val_set)

    def train(self) -> dict:
        """Run the full loop; returns summary with best validation state."""
        cfg = self.config
        best_val = math.inf
        best_state = None
        best_epoch = -1
        epochs_since_best = 0
        val0 = self.validation_loss()
        self.log(f"epoch -1 val_loss {val0:.10e}")
        history = {"val": [val0], "train": []}

        for epoch in range(cfg.max_epochs):
            order = self.rng.permutation(len(self.train_set))
            if cfg.steps_per_epoch:
                order = order[:cfg.steps_per_epoch * cfg.batch_size]
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [self.train_set[i] for i in order[start:start + cfg.batch_size]]
                mean_loss, norm = self._train_batch(batch)
                self.global_step += 1
                epoch_losses.append(mean_loss)
                self.log(f"step {self.global_step} epoch {epoch} "
                         f"loss {mean_loss:.10e} grad_norm {norm:.10e}")
            train_loss = float(np.mean(epoch_losses))
            val_loss = self.validation_loss()
            history["train"].append(train_loss)
            history["val"].append(val_loss)
            self.log(f"epoch {epoch} train_loss {train_loss:.10e} val_loss {val_loss:.10e}")
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = self._snapshot()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.early_stop_patience:
                    self.log(f"early_stop epoch {epoch}")
                    break
        if best_state is not None:
            self._restore(best_state)
        self.log(f"best epoch {best_epoch} val_loss {best_val:.10e}")
        return {"best_val": best_val, "best_epoch": best_epoch,
                "initial_val": val0, "history": history}

    def _snapshot(self) -> dict:
        state = {name: t.data.copy() for name, t in self.model.named_parameters().items()}
        state["__stats__"] = {k: v.copy() for k, v in self.model.running_stats().items()}
        return state

    def _restore(self, state: dict):
        for name, tensor in self.model.named_parameters().items():
            tensor.data = state[name].copy()
        stats = state["__stats__"]
        for i, layer in enumerate(self.model.conv_layers, start=1):
            layer.running_mean = stats[f"conv{i}.running_mean"].copy()
            layer.running_var = stats[f"conv{i}.running_var"].copy()


@dataclass
class EmbedderTrainConfig:
    learning_rate: float = 0.003
    batch_size: int = 8
    epochs: int = 5
    grad_clip_norm: float = 10.0
    seed: int = 0
    max_utterances: int = 160

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def collect_speaker_utterances(samples: list[data.MixtureSample]) -> list[tuple[str, np.ndarray]]:
    """Unique (speaker_id, waveform) pairs found in a split (targets and
    references are both single-speaker utterances)."""
    seen = set()
    utterances = []
    for sample in samples:
        for speaker, wave in ((sample.target_speaker_id, sample.target),
                              (sample.target_speaker_id, sample.reference)):
            key = (speaker, wave[:64].tobytes())
            if key not in seen:
                seen.add(key)
                utterances.append((speaker, wave))
    return utterances


class EmbedderTrainer:
    """Speaker-classification training of the embedder on single-speaker
    utterances; embeddings are the normalized pre-head projections."""

    def __init__(self, model: networks.EmbedderModel,
                 utterances: list[tuple[str, np.ndarray]],
                 config: EmbedderTrainConfig, log=None):
        if len(utterances) < 2:
            raise data.DataError("need at least 2 utterances to train the embedder")
        self.model = model
        self.config = config
        self.log = log or (lambda line: None)
        self.rng = np.random.default_rng([config.seed, 0xE3B7])
        utterances = utterances[:config.max_utterances]
        self.speakers = sorted({speaker for speaker, _ in utterances})
        stft_cfg = model.config.stft
        self.items = [
            (dsp.log_mel(wave, stft_cfg, model.config.n_mels).data.astype(model.config.np_dtype),
             self.speakers.index(speaker))
            for speaker, wave in utterances]
        rng_head = np.random.default_rng([config.seed, 0x4EAD])
        bound = 1.0 / np.sqrt(model.config.embed_dim)
        self.head_w = ad.parameter(
            rng_head.uniform(-bound, bound, (len(self.speakers), model.config.embed_dim)),
            dtype=model.config.np_dtype)
        self.head_scale = ad.parameter(np.full((), 10.0), dtype=model.config.np_dtype)
        self.params = model.parameters() + [self.head_w, self.head_scale]
        self.optimizer = Adam(self.params, lr=config.learning_rate)

    def _cross_entropy(self, feats: np.ndarray, label: int) -> ad.Tensor:
        # cosine softmax: scaled cosines between the unit embedding and
        # unit class rows, which spreads speakers over the sphere
        row_norm = ad.power(ad.add(ad.tensor_sum(
            ad.mul(self.head_w, self.head_w), axis=1, keepdims=True), 1e-12), -0.5)
        rows = ad.mul(self.head_w, ad.expand(row_norm, self.head_w.shape))
        cosines = ad.matmul(rows, self.model.embedding(feats))
        logits = ad.mul(cosines, self.head_scale)
        shift = float(logits.data.max())  # stabilizing constant
        shifted = ad.sub(logits, shift)
        log_norm = ad.log(ad.tensor_sum(ad.exp(shifted)))
        return ad.sub(log_norm, ad.reshape(ad.narrow(shifted, 0, label, 1), ()))

    def train(self) -> dict:
        cfg = self.config
        history = []
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(len(self.items))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                total = 0.0
                for idx in batch:
                    feats, label = self.items[idx]
                    loss = self._cross_entropy(feats, label)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericalError(f"embedder loss is {value}")
                    total += value
                    ad.backward(ad.mul(loss, 1.0 / len(batch)))
                clip_gradients(self.params, cfg.grad_clip_norm)
                self.optimizer.step()
                ad.zero_grads(self.params)
                epoch_losses.append(total / len(batch))
            mean_loss = float(np.mean(epoch_losses))
            history.append(mean_loss)
            self.log(f"embedder epoch {epoch} loss {mean_loss:.10e}")
        return {"history": history, "speakers": self.speakers}


MASK_MODES = ("model", "oracle", "identity")


def evaluate_samples(samples: list[data.MixtureSample],
                     stft_cfg: dsp.StftConfig,
                     model: networks.SeparatorModel | None = None,
                     embedder: networks.EmbedderModel | None = None,
                     mask_mode: str = "model") -> list[tuple[str, float, float]]:
    """Per-sample (id, SI-SDR of mixture, SI-SDR of extraction) rows,
    compared on the fully-overlapped interior."""
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
    if mask_mode == "model" and (model is None or embedder is None):
        raise ConfigError("mask_mode 'model' needs a separator and an embedder")
    rows = []
    for sample in samples:
        spec = dsp.stft(sample.mixture, stft_cfg)
        if mask_mode == "model":
            emb = networks.embed(sample.reference, embedder).astype(model.config.np_dtype)
            with ad.no_grad():
                mask = networks.separate(
                    spec.magnitude().astype(model.config.np_dtype), emb, model).data
        elif mask_mode == "oracle":
            mask = networks.oracle_mask(
                dsp.stft(sample.target, stft_cfg),
                dsp.stft(sample.mixture - sample.target, stft_cfg))
        else:
            mask = np.ones_like(spec.bins, dtype=np.float64).real
        extracted = networks.apply_mask(spec, mask)
        sl = dsp.interior_slice(stft_cfg, spec.num_frames)
        target = sample.target[sl]
        rows.append((sample.sample_id,
                     losses.si_snr(sample.mixture[sl], target),
                     losses.si_snr(extracted[sl], target)))
    return rows


def extract_waveform(mixture: np.ndarray, reference: np.ndarray,
                     model: networks.SeparatorModel,
                     embedder: networks.EmbedderModel) -> np.ndarray:
    """Inference pipeline: embed the reference, mask the mixture, synthesize."""
    spec = dsp.stft(mixture, model.config.stft)
    emb = networks.embed(reference, embedder).astype(model.config.np_dtype)
    with ad.no_grad():
        mask = networks.separate(spec.magnitude().astype(model.config.np_dtype),
                                 emb, model).data
    return networks.apply_mask(spec, mask)


# --- gradient verification -------------------------------------------------

def _toy_stft(frames: int = 8) -> dsp.StftConfig:
    return dsp.StftConfig(16, 16, 8, window="sqrt-hann", sample_rate=160)


KINK_MARGIN = 2e-3


def _shift_off_kinks(model: networks.SeparatorModel, forward):
    """Nudge batch-norm/FC1 biases until every ReLU input clears the kink
    by KINK_MARGIN, so central differences see a smooth function."""
    shift = np.float64(0.0037)
    for _ in range(80):
        with ad.no_grad(), ad.watch_relu_margins() as margins:
            forward()
        if min(margins) >= KINK_MARGIN:
            return
        for layer in model.conv_layers:
            layer.beta.data = layer.beta.data + shift
        model.fc1_b.data = model.fc1_b.data + shift
    raise NumericalError("could not move the evaluation point off ReLU kinks")


def run_gradcheck(width_factor: float = 1.0, seed: int = 0,
                  eps: float = 1e-5) -> list[tuple[str, float]]:
    """Finite-difference checks over cells, separators (both wirings and
    both losses), the embedder, and the standalone losses, at toy sizes
    scaled by ``width_factor``. Returns (name, max relative error) pairs.

    Separator evaluation points are first shifted so no ReLU input sits
    within KINK_MARGIN of zero; finite differences across the kink would
    measure an average of two slopes rather than the gradient.
    """
    if width_factor <= 0:
        raise ConfigError("width_factor must be positive")

    def sized(n, minimum=1):
        return max(minimum, round(n * width_factor))

    rng = np.random.default_rng([seed, 0x96AD])
    results = []

    hidden, feat, emb_dim = sized(4, 2), sized(5, 2), sized(3, 1)
    for wiring in (cells.GateWiring.STANDARD, cells.GateWiring.CUSTOMIZED):
        params = cells.LstmParams.init(rng, hidden, feat, emb_dim, wiring)
        state = cells.LstmState(ad.constant(rng.standard_normal((hidden, 1))),
                                ad.constant(rng.standard_normal((hidden, 1))))
        r_t = ad.constant(rng.standard_normal((feat, 1)))
        e = ad.constant(rng.standard_normal((emb_dim, 1)))

        def cell_loss():
            new_state, _ = cells.step_with_gates(params, state, r_t, e)
            return ad.tensor_sum(ad.mul(new_state.h, new_state.h))

        results.append((f"cell_step_{wiring.value}",
                        ad.grad_check(cell_loss, params.parameters(), eps)))

    seq_params = cells.LstmParams.init(rng, hidden, feat, emb_dim,
                                       cells.GateWiring.CUSTOMIZED)
    seq_feats = rng.standard_normal((feat, 8))
    seq_e = rng.standard_normal((emb_dim, 1))
    results.append(("cell_sequence_T8", ad.grad_check(
        lambda: ad.tensor_sum(cells.run_sequence(seq_params, seq_feats, seq_e)),
        seq_params.parameters(), eps)))

    stft_cfg = _toy_stft()
    signal = rng.standard_normal(16 + 7 * 8) * 0.3
    spec = dsp.stft(signal, stft_cfg)
    target = rng.standard_normal(spec.num_frames * 8 + 8) * 0.3
    interior = dsp.interior_slice(stft_cfg, spec.num_frames)
    for wiring in ("standard", "customized"):
        for loss_kind in ("sisnr", "plc"):
            config = networks.SeparatorConfig(
                fft_size=16, frame_length=16, frame_shift=8, sample_rate=160,
                conv_filters=sized(2), lstm_hidden=sized(4, 2), fc1_size=sized(5, 2),
                embed_dim=sized(3, 1), wiring=wiring)
            model = networks.SeparatorModel(config, seed=seed)
            emb = rng.standard_normal((config.embed_dim, 1))
            mag = spec.magnitude()
            target_mag = np.abs(dsp.stft(target[:signal.size], stft_cfg).bins)

            def sep_loss():
                mask = networks.separate(mag, emb, model, train=True, update_stats=False)
                if loss_kind == "plc":
                    return losses.plc_loss(ad.mul(mask, ad.constant(mag)), target_mag)
                wave = networks.masked_istft(mask, spec)
                est = ad.narrow(wave, 0, interior.start, interior.stop - interior.start)
                return losses.si_snr_loss(est, target[interior])

            _shift_off_kinks(model, sep_loss)
            results.append((f"separator_{wiring}_{loss_kind}",
                            ad.grad_check(sep_loss, model.parameters(), eps)))

    emb_config = networks.EmbedderConfig(
        fft_size=16, frame_length=16, frame_shift=8, sample_rate=160,
        n_mels=sized(4, 2), hidden=sized(4, 2), n_layers=2, embed_dim=sized(3, 1))
    emb_model = networks.EmbedderModel(emb_config, seed=seed)
    emb_feats = rng.standard_normal((emb_config.n_mels, 6))
    probe = ad.constant(rng.standard_normal((emb_config.embed_dim, 1)))
    results.append(("embedder", ad.grad_check(
        lambda: ad.tensor_sum(ad.mul(emb_model.embedding(emb_feats), probe)),
        emb_model.parameters(), eps)))

    est = ad.parameter(rng.standard_normal(40))
    tgt = rng.standard_normal(40)
    results.append(("si_snr_loss", ad.grad_check(
        lambda: losses.si_snr_loss(est, tgt), [est], eps)))
    est_mag = ad.parameter(np.abs(rng.standard_normal((6, 5))) + 0.1)
    tgt_mag = np.abs(rng.standard_normal((6, 5)))
    results.append(("plc_loss", ad.grad_check(
        lambda: losses.plc_loss(est_mag, tgt_mag), [est_mag], eps)))
    return results
