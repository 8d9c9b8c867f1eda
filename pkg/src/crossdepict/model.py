"""Dense feature network plus a final classifier head.

The head can be trainable, fixed to uniform random weights, or fixed to the
orthonormal basis obtained from the SVD of a random draw. Classification picks
the dominant direction: the column of ``W`` with the largest response.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import ParamSet, Tensor, apply_primitive, relu, tanh

HEAD_MODES = ("trainable", "fixed-random", "fixed-orthogonal")
CHECKPOINT_MAGIC = "crossdepict-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureNetSpec:
    widths: tuple
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ModelError("feature net needs an input width and at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ModelError(f"widths must be positive, got {self.widths}")
        if self.activation not in ("relu", "tanh"):
            raise ModelError(f"activation must be relu or tanh, got {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def layer_names(self, i: int) -> tuple[str, str]:
        return f"layer{i}.W", f"layer{i}.b"

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "seed": int(self.seed)}


@dataclass
class ClassifierHead:
    W: np.ndarray
    bias: np.ndarray
    mode: str = "trainable"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ModelError(f"head mode must be one of {HEAD_MODES}, got {self.mode!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.W.ndim != 2 or self.bias.shape != (self.W.shape[1],):
            raise ModelError(f"head W {self.W.shape} and bias {self.bias.shape} disagree")

    @property
    def frozen(self) -> bool:
        return self.mode != "trainable"

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def tobytes(self) -> bytes:
        return self.W.tobytes() + self.bias.tobytes()


@dataclass
class Model:
    spec: FeatureNetSpec
    features: ParamSet
    head: ClassifierHead
    # parameter names belonging to the "task network" (last feature layer + head)
    task_names: tuple = field(default=())

    def __post_init__(self):
        if self.head.W.shape[0] != self.spec.output_dim:
            raise ModelError(f"feature width {self.spec.output_dim} does not match head input "
                             f"width {self.head.W.shape[0]}")
        if not self.task_names:
            self.task_names = self.spec.layer_names(self.spec.n_layers - 1) + ("head.W", "head.b")

    @property
    def n_classes(self) -> int:
        return self.head.W.shape[1]

    def params(self) -> ParamSet:
        return ParamSet(list(self.features.arrays().items())
                        + [("head.W", self.head.W), ("head.b", self.head.bias)])

    def trainable_names(self) -> tuple:
        names = tuple(self.features.names)
        return names if self.head.frozen else names + ("head.W", "head.b")

    def with_params(self, params) -> "Model":
        """Copy of this model with any subset of its parameters replaced."""
        feats = ParamSet((k, np.array(params[k] if k in params else v, dtype=np.float64))
                         for k, v in self.features.arrays().items())
        W = np.array(params["head.W"], dtype=np.float64) if "head.W" in params else self.head.W.copy()
        b = np.array(params["head.b"], dtype=np.float64) if "head.b" in params else self.head.bias.copy()
        return Model(self.spec, feats, replace(self.head, W=W, bias=b), self.task_names)

    def copy(self) -> "Model":
        return self.with_params({})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_features(spec: FeatureNetSpec) -> ParamSet:
    """Per layer, weights and biases uniform on +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        wn, bn = spec.layer_names(i)
        out.append((wn, _uniform(rng, bound, (fan_in, fan_out))))
        out.append((bn, _uniform(rng, bound, (fan_out,))))
    return ParamSet(out)


def init_head_random(M: int, N: int, seed: int) -> ClassifierHead:
    """Frozen head with entries uniform on [-1/sqrt(M), 1/sqrt(M)] and zero bias."""
    if N < 2:
        raise ModelError(f"need at least 2 classes, got N={N}")
    if M < N:
        raise ModelError(f"head input width M={M} is smaller than class count N={N}")
    rng = np.random.default_rng(seed)
    W = _uniform(rng, 1.0 / np.sqrt(M), (M, N))
    return ClassifierHead(W, np.zeros(N), "fixed-random", seed)


def init_head_trainable(M: int, N: int, seed: int) -> ClassifierHead:
    if M < N or N < 2:
        raise ModelError(f"invalid head shape M={M}, N={N}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(M)
    W = _uniform(rng, bound, (M, N))
    return ClassifierHead(W, _uniform(rng, bound, (N,)), "trainable", seed)


def orthogonalize_head(head: ClassifierHead) -> ClassifierHead:
    """Replace W by the orthonormal basis of its column space from a thin SVD.

    Columns are the leading left singular vectors, sign-fixed so each column's
    largest-magnitude entry is positive. Bias is reset to zero.
    """
    W = head.W
    if np.abs(W.T @ W - np.eye(W.shape[1])).max() < 1e-12:
        # equal singular values make the SVD basis arbitrary; keep W so the map is idempotent
        U = W
    else:
        U, s, _ = np.linalg.svd(W, full_matrices=False)
        if s.size == 0 or s[-1] < 1e-10 * s[0]:
            raise ModelError(f"head W is rank deficient (singular values {s[0]:.3g} .. {s[-1]:.3g})")
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    Wo = U * signs
    return ClassifierHead(Wo, np.zeros(head.W.shape[1]), "fixed-orthogonal", head.seed)


def build_model(spec: FeatureNetSpec, n_classes: int, head_mode: str = "trainable",
                head_seed: Optional[int] = None) -> Model:
    """Fresh model; the head seed defaults to one derived from the feature seed."""
    if spec.output_dim < n_classes:
        raise ModelError(f"final width {spec.output_dim} smaller than class count {n_classes}")
    if head_seed is None:
        head_seed = int(np.random.SeedSequence([spec.seed, 1]).generate_state(1)[0])
    M = spec.output_dim
    if head_mode == "trainable":
        head = init_head_trainable(M, n_classes, head_seed)
    elif head_mode == "fixed-random":
        head = init_head_random(M, n_classes, head_seed)
    elif head_mode == "fixed-orthogonal":
        head = orthogonalize_head(init_head_random(M, n_classes, head_seed))
    else:
        raise ModelError(f"unknown head mode {head_mode!r}")
    return Model(spec, init_features(spec), head)


def network_logits(spec: FeatureNetSpec, params, x) -> Tensor:
    """Logits for batch ``x`` given every parameter in ``params`` (arrays or Tensors)."""
    act = relu if spec.activation == "relu" else tanh
    h = x
    for i in range(spec.n_layers):
        wn, bn = spec.layer_names(i)
        h = act(apply_primitive("add", [apply_primitive("matmul", [h, params[wn]]), params[bn]]))
    return apply_primitive("add", [apply_primitive("matmul", [h, params["head.W"]]), params["head.b"]])


def forward(model: Model, x, params=None) -> Tensor:
    """Logits ``h(x) W + b``; ``params`` (e.g. taped leaves) overrides stored values by name."""
    width = np.shape(x.data if isinstance(x, Tensor) else x)
    if len(width) != 2 or width[1] != model.spec.widths[0]:
        raise ModelError(f"input shape {width} does not match feature input width "
                         f"{model.spec.widths[0]}")
    values = dict(model.params().items())
    if params is not None:
        values.update(params)
    return network_logits(model.spec, values, x)


def predict(model: Model, x) -> np.ndarray:
    return classify(forward(model, np.asarray(x, dtype=np.float64)))


def classify(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    y = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    if y.ndim == 1:
        y = y[None, :]
    return np.argmax(y, axis=-1)


def head_angle_stats(head) -> dict:
    """Pairwise |cos| between head columns and the column-norm range."""
    W = head.W if isinstance(head, ClassifierHead) else np.asarray(head, dtype=np.float64)
    if W.shape[1] < 2:
        raise ModelError("need at least two columns")
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise ModelError(f"zero-norm column at index {int(np.flatnonzero(norms == 0)[0])}")
    U = W / norms
    cos = np.abs(U.T @ U)[np.triu_indices(W.shape[1], k=1)]
    return {
        "mean_abs_cos": float(cos.mean()),
        "max_abs_cos": float(cos.max()),
        "min_norm": float(norms.min()),
        "max_norm": float(norms.max()),
    }


# ---------------------------------------------------------------------------
# checkpoint files: text header, then little-endian float64 payload


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    params = model.params()
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        "spec " + json.dumps(model.spec.to_dict(), sort_keys=True),
        f"head_mode {model.head.mode}",
        f"head_seed {int(model.head.seed)}",
        "task " + " ".join(model.task_names),
    ]
    if extra:
        lines.append("extra " + json.dumps(extra, sort_keys=True))
    for k, v in params.items():
        lines.append(f"param {k} " + "x".join(str(d) for d in np.shape(v)))
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    path.write_bytes(("\n".join(lines) + "\n").encode() + payload)
    return path


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise ModelError(f"{path}: missing header terminator")
    header = raw[:cut].decode().splitlines()
    payload = raw[cut + len(marker):]
    magic = header[0].split()
    if magic[0] != CHECKPOINT_MAGIC or int(magic[1]) != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    meta, shapes = {}, []
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "param":
            name, dims = rest.split(" ")
            shapes.append((name, tuple(int(d) for d in dims.split("x")) if dims else ()))
        else:
            meta[key] = rest
    values, off = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape, dtype=int)) * 8
        if off + n > len(payload):
            raise ModelError(f"{path}: payload truncated at {name}")
        values[name] = np.frombuffer(payload[off:off + n], dtype="<f8").astype(np.float64).reshape(shape)
        off += n
    if off != len(payload):
        raise ModelError(f"{path}: {len(payload) - off} trailing payload bytes")
    sd = json.loads(meta["spec"])
    spec = FeatureNetSpec(tuple(sd["widths"]), sd["activation"], sd["seed"])
    feats = ParamSet((k, values[k]) for k, _ in shapes if not k.startswith("head."))
    head = ClassifierHead(values["head.W"], values["head.b"], meta["head_mode"], int(meta["head_seed"]))
    return Model(spec, feats, head, tuple(meta.get("task", "").split()))
