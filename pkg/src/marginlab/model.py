"""Single-hidden-layer ReLU MLPs: init, SGD+momentum training, evaluation,
input-space gradients of logit differences, and checkpoint IO.

The classifier maps R^d -> R^C logits via W2 @ relu(W1 @ x + b1) + b2.
Predicted class is the argmax logit; ties break toward the lowest class
index (numpy argmax convention), which keeps "correctly classified"
filtering deterministic.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"MLCK"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the training loss goes non-finite."""


@dataclass
class MlpModel:
    """Weights of a 1-hidden-layer ReLU MLP. Treated as immutable once built."""

    W1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (classes, hidden)
    b2: np.ndarray  # (classes,)
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[0]

    @property
    def param_count(self) -> int:
        return param_count(self.input_dim, self.hidden_width, self.num_classes)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a single input vector."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ValueError(f"expected input of shape ({self.input_dim},), got {x.shape}")
        return self.forward_batch(x[None, :])[0]

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        """Logits for a batch (B, d) -> (B, C)."""
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs with d={self.input_dim}, got {X.shape[1]}")
        H = np.maximum(X @ self.W1.T + self.b1, 0.0)
        return H @ self.W2.T + self.b2

    def predict_batch(self, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
        out = np.empty(len(X), dtype=np.int64)
        for lo in range(0, len(X), chunk):
            out[lo:lo + chunk] = np.argmax(self.forward_batch(X[lo:lo + chunk]), axis=1)
        return out

    def pair_value(self, X: np.ndarray, I: np.ndarray, J: np.ndarray) -> np.ndarray:
        """g(x) = f(x)[i] - f(x)[j] for each row (vectorized over the batch)."""
        H = np.maximum(X @ self.W1.T + self.b1, 0.0)
        wout = self.W2[I] - self.W2[J]
        return np.einsum("bh,bh->b", H, wout) + (self.b2[I] - self.b2[J])

    def pair_value_grad(self, X, I, J) -> tuple[np.ndarray, np.ndarray]:
        """g and its exact input gradient for each row.

        Backprop through the ReLU with subgradient 0 at the kink: the unit
        mask is z > 0 strictly.
        """
        Z = X @ self.W1.T + self.b1
        H = np.maximum(Z, 0.0)
        wout = self.W2[I] - self.W2[J]
        g = np.einsum("bh,bh->b", H, wout) + (self.b2[I] - self.b2[J])
        grad = (wout * (Z > 0.0)) @ self.W1
        return g, grad


@dataclass
class LinearModel:
    """Affine classifier W x + b; same protocol as MlpModel for the solver."""

    W: np.ndarray  # (classes, d)
    b: np.ndarray  # (classes,)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_batch(np.asarray(x, dtype=np.float64)[None, :])[0]

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        return X @ self.W.T + self.b

    def predict_batch(self, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
        return np.argmax(self.forward_batch(X), axis=1)

    def pair_value(self, X, I, J) -> np.ndarray:
        wout = self.W[I] - self.W[J]
        return np.einsum("bd,bd->b", X, wout) + (self.b[I] - self.b[J])

    def pair_value_grad(self, X, I, J):
        wout = self.W[I] - self.W[J]
        g = np.einsum("bd,bd->b", X, wout) + (self.b[I] - self.b[J])
        return g, wout


def param_count(input_dim: int, hidden_width: int, num_classes: int) -> int:
    return hidden_width * input_dim + hidden_width + num_classes * hidden_width + num_classes


def init_model(input_dim: int, hidden_width: int, num_classes: int, seed: int) -> MlpModel:
    """Fan-in-scaled uniform init: each layer U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if min(input_dim, hidden_width, num_classes) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    s1 = 1.0 / np.sqrt(input_dim)
    s2 = 1.0 / np.sqrt(hidden_width)
    return MlpModel(
        W1=rng.uniform(-s1, s1, size=(hidden_width, input_dim)),
        b1=rng.uniform(-s1, s1, size=hidden_width),
        W2=rng.uniform(-s2, s2, size=(num_classes, hidden_width)),
        b2=rng.uniform(-s2, s2, size=num_classes),
        seed=seed,
    )


def input_gradient(model, x: np.ndarray, i: int, j: int) -> np.ndarray:
    """Exact gradient of f(x)[i] - f(x)[j] with respect to the input."""
    if i == j:
        raise ValueError("classes i and j must differ")
    x = np.asarray(x, dtype=np.float64)
    _, grad = model.pair_value_grad(x[None, :], np.array([i]), np.array([j]))
    return grad[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr0: float = 0.01
    lr_decay: float = 0.99
    lr_decay_every: int = 5
    momentum: float = 0.9
    max_epochs: int = 100
    target_train_error: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TrainReport:
    train_error: list[float] = field(default_factory=list)   # running, per epoch
    val_error: list[float] = field(default_factory=list)     # full pass, per epoch
    mean_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    final_train_error: float = float("nan")                  # full pass at the end
    epochs_run: int = 0
    interpolated: bool = False

    def to_csv(self, path, header_comment: str | None = None) -> None:
        """Training curves: epoch, train_error, val_error, mean_loss."""
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "train_error", "val_error", "mean_loss"])
            for e in range(self.epochs_run):
                w.writerow([e, repr(self.train_error[e]), repr(self.val_error[e]),
                            repr(self.mean_loss[e])])


def _error_rate(model_f32, X, y, chunk=8192) -> float:
    wrong = 0
    W1, b1, W2, b2 = model_f32
    for lo in range(0, len(X), chunk):
        H = np.maximum(X[lo:lo + chunk] @ W1.T + b1, 0.0)
        pred = np.argmax(H @ W2.T + b2, axis=1)
        wrong += int(np.sum(pred != y[lo:lo + chunk]))
    return wrong / len(X)


def train(model: MlpModel, train_ds, val_ds, cfg: TrainConfig) -> tuple[MlpModel, TrainReport]:
    """SGD with momentum on the cross-entropy loss over effective labels.

    Mini-batches are drawn by a seeded per-epoch permutation (remainder batch
    included). The learning rate is lr0 * lr_decay^(epoch // lr_decay_every).
    Stops at max_epochs or once the full-pass train error reaches
    target_train_error. Internally computes in float32 for speed; the
    returned model is float64.

    The per-epoch train_error curve is the running error of pre-update batch
    predictions; final_train_error is a full post-training pass.
    """
    if train_ds.input_dim != model.input_dim or train_ds.num_classes != model.num_classes:
        raise ValueError("train dataset does not match model dimensions")
    if val_ds is not None and val_ds.input_dim != model.input_dim:
        raise ValueError("validation dataset does not match model input_dim")

    X = train_ds.features.astype(np.float32)
    y = train_ds.effective_labels
    Xv = val_ds.features.astype(np.float32) if val_ds is not None else None
    yv = (val_ds.true_labels if val_ds is not None and val_ds.split == "validation"
          else (val_ds.effective_labels if val_ds is not None else None))

    W1 = model.W1.astype(np.float32)
    b1 = model.b1.astype(np.float32)
    W2 = model.W2.astype(np.float32)
    b2 = model.b2.astype(np.float32)
    vW1 = np.zeros_like(W1); vb1 = np.zeros_like(b1)
    vW2 = np.zeros_like(W2); vb2 = np.zeros_like(b2)

    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    report = TrainReport()

    for epoch in range(cfg.max_epochs):
        lr = np.float32(cfg.lr_at(epoch))
        perm = rng.permutation(n)
        loss_sum = 0.0
        wrong = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            B = len(idx)

            Z = xb @ W1.T + b1
            H = np.maximum(Z, 0.0)
            logits = H @ W2.T + b2

            shifted = logits - logits.max(axis=1, keepdims=True)
            expv = np.exp(shifted)
            probs = expv / expv.sum(axis=1, keepdims=True)
            batch_loss = float(-np.mean(
                shifted[np.arange(B), yb] - np.log(expv.sum(axis=1))))
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {lo}")
            loss_sum += batch_loss * B
            wrong += int(np.sum(np.argmax(logits, axis=1) != yb))

            dlogits = probs
            dlogits[np.arange(B), yb] -= 1.0
            dlogits /= np.float32(B)
            dW2 = dlogits.T @ H
            db2 = dlogits.sum(axis=0)
            dH = dlogits @ W2
            dZ = dH * (Z > 0.0)
            dW1 = dZ.T @ xb
            db1 = dZ.sum(axis=0)

            m = np.float32(cfg.momentum)
            vW1 = m * vW1 - lr * dW1; W1 += vW1
            vb1 = m * vb1 - lr * db1; b1 += vb1
            vW2 = m * vW2 - lr * dW2; W2 += vW2
            vb2 = m * vb2 - lr * db2; b2 += vb2

        report.lr.append(float(lr))
        report.mean_loss.append(loss_sum / n)
        report.train_error.append(wrong / n)
        if Xv is not None:
            report.val_error.append(_error_rate((W1, b1, W2, b2), Xv, yv))
        else:
            report.val_error.append(float("nan"))
        report.epochs_run = epoch + 1

        if report.train_error[-1] <= cfg.target_train_error:
            # running error can lag the weights by one update; confirm
            if _error_rate((W1, b1, W2, b2), X, y) <= cfg.target_train_error:
                break

    trained = MlpModel(
        W1=W1.astype(np.float64), b1=b1.astype(np.float64),
        W2=W2.astype(np.float64), b2=b2.astype(np.float64), seed=model.seed,
    )
    report.final_train_error = evaluate(trained, train_ds)
    report.interpolated = report.final_train_error <= cfg.target_train_error
    return trained, report


def evaluate(model, ds, chunk: int = 4096) -> float:
    """Error rate: argmax logit vs effective labels on the train split,
    true labels on the validation split."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    labels = ds.true_labels if ds.split == "validation" else ds.effective_labels
    pred = model.predict_batch(ds.features, chunk=chunk)
    return float(np.mean(pred != labels))


# ---------------------------------------------------------------------------
# Checkpoint format (version 1, little-endian):
#   magic   4 bytes  b"MLCK"
#   version u8
#   tag     16 bytes (manifest-hash prefix; zeros when standalone)
#   dims    3 x u32  (input_dim, hidden_width, num_classes)
#   seed    i64
#   blocks  float64 row-major: W1, b1, W2, b2
# Round-trips are bit-exact.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sB16sIIIq")


def save_checkpoint(model: MlpModel, path, tag: bytes = b"") -> None:
    tag = tag[:16].ljust(16, b"\0")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, tag,
                              model.input_dim, model.hidden_width,
                              model.num_classes, model.seed))
        for block in (model.W1, model.b1, model.W2, model.b2):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path, expect_tag: bytes | None = None) -> MlpModel:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, tag, d, h, c, seed = _HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if expect_tag is not None and tag != expect_tag[:16].ljust(16, b"\0"):
            raise ValueError(f"{path}: checkpoint tag mismatch (different manifest?)")
        payload = np.frombuffer(fh.read(), dtype="<f8")
    sizes = [h * d, h, c * h, c]
    if len(payload) != sum(sizes):
        raise ValueError(f"{path}: truncated checkpoint payload")
    ofs = np.cumsum([0] + sizes)
    return MlpModel(
        W1=payload[ofs[0]:ofs[1]].reshape(h, d).copy(),
        b1=payload[ofs[1]:ofs[2]].copy(),
        W2=payload[ofs[2]:ofs[3]].reshape(c, h).copy(),
        b2=payload[ofs[3]:ofs[4]].copy(),
        seed=seed,
    )
