"""Feed-forward network core: dense ReLU layers with softmax outputs,
cross-entropy, plain minibatch SGD, three speaker-identity fusion
topologies, and identity-preserving extension of trained models.

Identity fusion is held in separate weight blocks rather than widened
input matrices: layer pre-activations are x @ W + z @ Wid + b. This is
algebraically identical to concatenation but lets extend_for_identity
add a zero block whose contribution is exactly zero, so extended models
reproduce their parent bit for bit.

All arithmetic runs in float64, but every parameter is kept on the
float32 grid (init and each SGD step round through float32), so the
32-bit model file format round-trips losslessly.

Variants:
  A - one-hot fused at the input layer.
  B - one-hot through a bias-free linear embedding, then fused at the
      input layer.
  C - one-hot fused into the pre-activation of a later hidden layer
      (injection_layer, 1-based position in the hidden stack).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericError

MODEL_MAGIC = b"DNNM"
MODEL_VERSION = 1

Gradients = dict


@dataclass
class ArchitectureSpec:
    modality: str = "A"  # A | AV | AI | AVI
    variant: str | None = None  # None | A | B | C
    num_hidden_layers: int = 4
    hidden_width: int = 2048
    output_labels: int = 2371
    acoustic_dim: int = 440
    visual_dim: int = 0
    identity_dim: int = 0
    identity_embed_dim: int = 8  # variant B only
    injection_layer: int = 1  # variant C only

    def __post_init__(self):
        if self.modality not in ("A", "AV", "AI", "AVI"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.variant not in (None, "A", "B", "C"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if (self.variant is not None) != self.has_identity:
            raise ConfigError(
                f"variant {self.variant!r} inconsistent with modality {self.modality!r}"
            )
        if self.num_hidden_layers < 1:
            raise ConfigError("num_hidden_layers must be >= 1")
        if self.hidden_width < 1 or self.output_labels < 1 or self.acoustic_dim < 1:
            raise ConfigError("hidden_width, output_labels and acoustic_dim must be >= 1")
        if self.has_visual != (self.visual_dim > 0):
            raise ConfigError(
                f"visual_dim {self.visual_dim} inconsistent with modality {self.modality!r}"
            )
        if self.has_identity != (self.identity_dim > 0):
            raise ConfigError(
                f"identity_dim {self.identity_dim} inconsistent with modality "
                f"{self.modality!r}"
            )
        if self.variant == "B" and self.identity_embed_dim < 1:
            raise ConfigError("identity_embed_dim must be >= 1 for variant B")
        if self.variant == "C" and not 1 <= self.injection_layer < self.num_hidden_layers:
            raise ConfigError(
                f"injection_layer {self.injection_layer} outside "
                f"[1, {self.num_hidden_layers})"
            )

    @property
    def has_visual(self) -> bool:
        return "V" in self.modality

    @property
    def has_identity(self) -> bool:
        return "I" in self.modality

    @property
    def trunk_dim(self) -> int:
        return self.acoustic_dim + self.visual_dim

    def layer_input_dim(self, layer: int) -> int:
        """Conceptual (concatenation-equivalent) input width of hidden layer."""
        if layer == 0:
            base = self.trunk_dim
            if self.variant == "A":
                return base + self.identity_dim
            if self.variant == "B":
                return base + self.identity_embed_dim
            return base
        if self.variant == "C" and layer == self.injection_layer:
            return self.hidden_width + self.identity_dim
        return self.hidden_width

    def param_shapes(self) -> dict:
        """Canonical parameter declaration order and shapes."""
        H, K = self.hidden_width, self.output_labels
        shapes: dict[str, tuple] = {"W0": (self.trunk_dim, H), "b0": (H,)}
        for l in range(1, self.num_hidden_layers):
            shapes[f"W{l}"] = (H, H)
            shapes[f"b{l}"] = (H,)
        shapes["Wout"] = (H, K)
        shapes["bout"] = (K,)
        if self.variant == "A":
            shapes["Wid"] = (self.identity_dim, H)
        elif self.variant == "B":
            shapes["Wemb"] = (self.identity_dim, self.identity_embed_dim)
            shapes["Wid"] = (self.identity_embed_dim, H)
        elif self.variant == "C":
            shapes["Wid"] = (self.identity_dim, H)
        return shapes

    def to_json(self) -> str:
        return json.dumps(
            {
                "modality": self.modality,
                "variant": self.variant,
                "num_hidden_layers": self.num_hidden_layers,
                "hidden_width": self.hidden_width,
                "output_labels": self.output_labels,
                "acoustic_dim": self.acoustic_dim,
                "visual_dim": self.visual_dim,
                "identity_dim": self.identity_dim,
                "identity_embed_dim": self.identity_embed_dim,
                "injection_layer": self.injection_layer,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        try:
            data = json.loads(text)
            return cls(**data)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"bad architecture record: {exc}") from exc


@dataclass
class Batch:
    x: np.ndarray  # rows x trunk_dim
    z: np.ndarray | None = None  # rows x identity_dim
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.z is not None:
            self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
            if self.z.shape[0] != self.x.shape[0]:
                raise DataError(
                    f"identity rows {self.z.shape[0]} != input rows {self.x.shape[0]}"
                )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if self.labels.shape[0] != self.x.shape[0]:
                raise DataError(
                    f"label rows {self.labels.shape[0]} != input rows {self.x.shape[0]}"
                )

    def __len__(self):
        return self.x.shape[0]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")


@dataclass
class DnnModel:
    spec: ArchitectureSpec
    params: dict
    priors: np.ndarray | None = None  # K-vector of label priors, for decoding

    def copy(self) -> "DnnModel":
        return DnnModel(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            priors=None if self.priors is None else self.priors.copy(),
        )


def _f32_grid(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def init_model(spec: ArchitectureSpec, seed: int) -> DnnModel:
    """Zero-mean uniform weights with bounds sqrt(6)/sqrt(fan_in) (variance
    2/fan_in, sized for ReLU stacks), biases zero."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6D6F64)))
    params: dict[str, np.ndarray] = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            scale = np.sqrt(6.0) / np.sqrt(shape[0])
            params[name] = _f32_grid(rng.uniform(-scale, scale, size=shape))
    return DnnModel(spec=spec, params=params)


def _check_batch(model: DnnModel, batch: Batch) -> None:
    spec = model.spec
    if batch.x.shape[1] != spec.trunk_dim:
        raise DataError(
            f"input dim {batch.x.shape[1]} does not match model trunk dim "
            f"{spec.trunk_dim}"
        )
    if spec.has_identity:
        if batch.z is None:
            raise DataError("model expects an identity branch, batch has none")
        if batch.z.shape[1] != spec.identity_dim:
            raise DataError(
                f"identity dim {batch.z.shape[1]} does not match model "
                f"identity dim {spec.identity_dim}"
            )
    elif batch.z is not None:
        raise DataError("model takes no identity branch, batch has one")


def _hidden_activations(model: DnnModel, batch: Batch) -> list:
    """Forward through the hidden stack; returns per-layer ReLU outputs."""
    spec, P = model.spec, model.params
    acts = []
    a = batch.x @ P["W0"] + P["b0"]
    if spec.variant == "A":
        a += batch.z @ P["Wid"]
    elif spec.variant == "B":
        a += (batch.z @ P["Wemb"]) @ P["Wid"]
    h = np.maximum(a, 0.0)
    acts.append(h)
    for l in range(1, spec.num_hidden_layers):
        a = h @ P[f"W{l}"] + P[f"b{l}"]
        if spec.variant == "C" and l == spec.injection_layer:
            a += batch.z @ P["Wid"]
        h = np.maximum(a, 0.0)
        acts.append(h)
    return acts


def _logits(model: DnnModel, batch: Batch) -> np.ndarray:
    h = _hidden_activations(model, batch)[-1]
    return h @ model.params["Wout"] + model.params["bout"]


def forward(model: DnnModel, batch: Batch) -> np.ndarray:
    """Softmax posteriors, one row per batch row."""
    _check_batch(model, batch)
    logits = _logits(model, batch)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def forward_loss(model: DnnModel, batch: Batch) -> float:
    """Mean cross-entropy without gradient bookkeeping."""
    _check_batch(model, batch)
    _check_labels(batch, model.spec.output_labels)
    logits = _logits(model, batch)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(len(batch)), batch.labels]
    return float(np.mean(lse - picked))


def _check_labels(batch: Batch, num_labels: int) -> None:
    if batch.labels is None:
        raise DataError("batch carries no labels")
    if batch.labels.size and (
        batch.labels.min() < 0 or batch.labels.max() >= num_labels
    ):
        bad = int(
            batch.labels[(batch.labels < 0) | (batch.labels >= num_labels)][0]
        )
        raise DataError(f"label {bad} outside [0, {num_labels})")


def loss_and_gradients(model: DnnModel, batch: Batch):
    """Mean cross-entropy over the batch and gradients for every parameter."""
    _check_batch(model, batch)
    spec, P = model.spec, model.params
    _check_labels(batch, spec.output_labels)
    n = len(batch)
    acts = _hidden_activations(model, batch)
    logits = acts[-1] @ P["Wout"] + P["bout"]
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    post = e / denom
    rows = np.arange(n)
    lse = m[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - logits[rows, batch.labels]))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")

    grads: dict[str, np.ndarray] = {}
    delta = post.copy()
    delta[rows, batch.labels] -= 1.0
    delta /= n
    grads["Wout"] = acts[-1].T @ delta
    grads["bout"] = delta.sum(axis=0)
    d_h = delta @ P["Wout"].T
    for l in range(spec.num_hidden_layers - 1, -1, -1):
        d_a = d_h * (acts[l] > 0.0)
        below = batch.x if l == 0 else acts[l - 1]
        grads[f"W{l}"] = below.T @ d_a
        grads[f"b{l}"] = d_a.sum(axis=0)
        if spec.variant == "C" and l == spec.injection_layer:
            grads["Wid"] = batch.z.T @ d_a
        if l == 0:
            if spec.variant == "A":
                grads["Wid"] = batch.z.T @ d_a
            elif spec.variant == "B":
                emb = batch.z @ P["Wemb"]
                grads["Wid"] = emb.T @ d_a
                grads["Wemb"] = batch.z.T @ (d_a @ P["Wid"].T)
        else:
            d_h = d_a @ P[f"W{l}"].T
    return loss, grads


def sgd_step(
    model: DnnModel,
    grads: Gradients,
    lr: float,
    trainable: frozenset[str] | None = None,
) -> DnnModel:
    """p <- p - lr * g for every parameter; no momentum, no decay.

    Updates the model in place and returns it. Parameters are re-rounded
    to the float32 grid to keep the file format lossless. When `trainable`
    is given, parameters outside that set are left untouched.
    """
    for name, p in model.params.items():
        if trainable is not None and name not in trainable:
            continue
        try:
            g = grads[name]
        except KeyError:
            raise DataError(f"gradients missing parameter {name!r}") from None
        if g.shape != p.shape:
            raise DataError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.shape}"
            )
        model.params[name] = _f32_grid(p - lr * g)
    return model


def extend_for_identity(
    si_model: DnnModel,
    variant: str,
    num_speakers: int,
    seed: int,
    identity_embed_dim: int = 8,
    injection_layer: int = 1,
    add_layer: bool | None = None,
) -> DnnModel:
    """Graft an identity pathway onto a trained speaker-independent model.

    All copied parameters are untouched and the new fusion block starts
    at zero, so the extended model's outputs equal the parent's exactly.
    Audio-visual models additionally get one more hidden layer,
    initialized near the identity map (small seeded noise), which keeps
    behavior close to the parent rather than exactly equal.
    """
    if si_model.spec.variant is not None:
        raise DataError("model already has an identity pathway")
    if variant not in ("A", "B", "C"):
        raise DataError(f"unknown fusion variant {variant!r}")
    if num_speakers < 1:
        raise DataError("num_speakers must be >= 1")
    old = si_model.spec
    if add_layer is None:
        add_layer = old.has_visual
    new_depth = old.num_hidden_layers + (1 if add_layer else 0)
    spec = replace(
        old,
        modality=old.modality + "I",
        variant=variant,
        num_hidden_layers=new_depth,
        identity_dim=num_speakers,
        identity_embed_dim=identity_embed_dim,
        injection_layer=injection_layer,
    )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x657874)))
    H = old.hidden_width
    params = {name: p.copy() for name, p in si_model.params.items()}
    if add_layer:
        name = f"W{old.num_hidden_layers}"
        params[name] = _f32_grid(
            np.eye(H) + 1e-3 * rng.standard_normal((H, H))
        )
        params[f"b{old.num_hidden_layers}"] = np.zeros(H, dtype=np.float64)
    if variant == "B":
        scale = 1.0 / np.sqrt(num_speakers)
        params["Wemb"] = _f32_grid(
            rng.uniform(-scale, scale, size=(num_speakers, identity_embed_dim))
        )
        params["Wid"] = np.zeros((identity_embed_dim, H), dtype=np.float64)
    else:
        params["Wid"] = np.zeros((num_speakers, H), dtype=np.float64)
    ordered = {name: params[name] for name in spec.param_shapes()}
    return DnnModel(
        spec=spec,
        params=ordered,
        priors=None if si_model.priors is None else si_model.priors.copy(),
    )


def predict_posteriors(model: DnnModel, x, z=None, chunk_rows: int = 1024) -> np.ndarray:
    """Frame-wise posteriors for a T x D feature matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if z is not None:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[0] == 1 and x.shape[0] > 1:
            z = np.repeat(z, x.shape[0], axis=0)
    out = np.empty((x.shape[0], model.spec.output_labels), dtype=np.float64)
    for start in range(0, x.shape[0], chunk_rows):
        stop = min(start + chunk_rows, x.shape[0])
        zc = None if z is None else z[start:stop]
        out[start:stop] = forward(model, Batch(x=x[start:stop], z=zc))
    return out


def fit(
    model: DnnModel,
    train: Batch,
    valid: Batch,
    cfg: TrainConfig,
    trainable: frozenset[str] | None = None,
):
    """Minibatch SGD with early stopping on validation cross-entropy.

    Frames are reshuffled each epoch with a per-epoch seeded permutation.
    Returns (model restored to the best-validation checkpoint, history).
    When `trainable` is given only those parameters are updated; the rest
    stay frozen at their incoming values.
    """
    _check_batch(model, train)
    _check_batch(model, valid)
    n = len(train)
    if n < 1 or len(valid) < 1:
        raise DataError("empty training or validation set")
    best = {k: v.copy() for k, v in model.params.items()}
    best_loss = _valid_loss(model, valid)
    history = {"train_loss": [], "valid_loss": [], "best_epoch": 0, "epochs_run": 0}
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x6570, epoch)))
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            sub = Batch(
                x=train.x[sel],
                z=None if train.z is None else train.z[sel],
                labels=train.labels[sel],
            )
            loss, grads = loss_and_gradients(model, sub)
            sgd_step(model, grads, cfg.learning_rate, trainable)
            epoch_loss += loss * len(sub)
        vloss = _valid_loss(model, valid)
        history["train_loss"].append(epoch_loss / n)
        history["valid_loss"].append(vloss)
        history["epochs_run"] = epoch
        if vloss < best_loss - 1e-12:
            best_loss = vloss
            best = {k: v.copy() for k, v in model.params.items()}
            history["best_epoch"] = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    model.params = best
    return model, history


def _valid_loss(model: DnnModel, valid: Batch, chunk_rows: int = 4096) -> float:
    total = 0.0
    n = len(valid)
    for start in range(0, n, chunk_rows):
        stop = min(start + chunk_rows, n)
        sub = Batch(
            x=valid.x[start:stop],
            z=None if valid.z is None else valid.z[start:stop],
            labels=valid.labels[start:stop],
        )
        total += forward_loss(model, sub) * (stop - start)
    return total / n


def _write_blob(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def save_model(model: DnnModel, path) -> None:
    """DNNM container: magic, u32 version, architecture record, then each
    parameter (name, dims, float32 LE payload) in declaration order, then
    optional float64 label priors."""
    with Path(path).open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        _write_blob(fh, model.spec.to_json().encode("utf-8"))
        names = list(model.spec.param_shapes())
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            p = model.params[name]
            _write_blob(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        if model.priors is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", model.priors.shape[0]))
            fh.write(np.ascontiguousarray(model.priors, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, name: str):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError(f"{self.name}: truncated model file")
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_model(path, expect_spec: ArchitectureSpec | None = None) -> DnnModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    r = _Reader(blob, str(path))
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic, not a model file")
    version = r.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    spec = ArchitectureSpec.from_json(r.take(r.u32()).decode("utf-8"))
    if expect_spec is not None and spec != expect_spec:
        raise DataError(
            f"{path}: architecture mismatch: file holds {spec.to_json()}, "
            f"expected {expect_spec.to_json()}"
        )
    expected_shapes = spec.param_shapes()
    num_params = r.u32()
    if num_params != len(expected_shapes):
        raise FormatError(
            f"{path}: {num_params} parameters in file, architecture "
            f"declares {len(expected_shapes)}"
        )
    params: dict[str, np.ndarray] = {}
    for expected_name in expected_shapes:
        name = r.take(r.u32()).decode("utf-8")
        if name != expected_name:
            raise FormatError(
                f"{path}: parameter {name!r} out of order, expected {expected_name!r}"
            )
        ndim = r.u32()
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim)))
        if shape != expected_shapes[name]:
            raise FormatError(
                f"{path}: parameter {name!r} has shape {shape}, architecture "
                f"declares {expected_shapes[name]}"
            )
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4")
        params[name] = data.reshape(shape).astype(np.float64)
    priors = None
    if r.u8() == 1:
        k = r.u32()
        priors = np.frombuffer(r.take(8 * k), dtype="<f8").copy()
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return DnnModel(spec=spec, params=params, priors=priors)
