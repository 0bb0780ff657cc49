"""Modality encoders, classifier heads, and the parameter bundle.

The sequence encoder is a unidirectional LSTM whose last hidden state is
the penultimate representation; the image encoder is a small residual
CNN (stem conv, identity-skip blocks per stage, strided downsample
between stages, global average pooling). Three heads map features to
probabilities: per-modality linear+sigmoid heads and a unified head with
one hidden layer consuming the concatenated features.

Parameters live in five named, pairwise-disjoint groups so the trainer
can update exactly the set each phase owns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Tensor, add, bias_add, conv2d, global_avg_pool, load_checkpoint, matmul,
    mul, relu, save_checkpoint, sigmoid, slice_cols, squeeze_row, tanh,
    unsqueeze_row,
)
from .errors import ConfigurationError, DimensionError, EmptySequenceError

GROUP_NAMES = ("seq_enc", "img_enc", "head_ehr", "head_cxr", "head_unified")

N_TASK_LABELS = 25
N_AUX_LABELS = 14
TASK_GROUP_COUNTS = {"acute": 12, "mixed": 5, "chronic": 8}


@dataclass(frozen=True)
class SeqEncoderSpec:
    """Sequence-encoder dimensions; feature dim equals the hidden dim."""
    input_dim: int = 34
    hidden_dim: int = 64

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("seq encoder dims must be positive")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dim


@dataclass(frozen=True)
class ImgEncoderSpec:
    """Image-encoder layout; feature dim equals the last stage's channels."""
    in_channels: int = 1
    image_side: int = 64
    stages: tuple = ((8, 1), (16, 1), (32, 1))

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("image encoder needs at least one stage")
        if self.image_side % (2 ** len(self.stages)) != 0:
            raise ConfigurationError(
                f"image side {self.image_side} not divisible by 2^{len(self.stages)}"
            )

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][0]


@dataclass(frozen=True)
class LabelSpace:
    """The 25 task labels with their group tags plus the 14 auxiliary labels."""
    task_labels: tuple
    task_groups: tuple
    aux_labels: tuple

    def __post_init__(self):
        if len(self.task_labels) != N_TASK_LABELS:
            raise ConfigurationError(f"expected {N_TASK_LABELS} task labels, got {len(self.task_labels)}")
        if len(self.task_groups) != N_TASK_LABELS:
            raise ConfigurationError("task_groups must parallel task_labels")
        if len(self.aux_labels) != N_AUX_LABELS:
            raise ConfigurationError(f"expected {N_AUX_LABELS} aux labels, got {len(self.aux_labels)}")
        if len(set(self.task_labels)) != len(self.task_labels):
            raise ConfigurationError("task label names must be unique")
        if len(set(self.aux_labels)) != len(self.aux_labels):
            raise ConfigurationError("aux label names must be unique")
        for group, count in TASK_GROUP_COUNTS.items():
            have = sum(1 for g in self.task_groups if g == group)
            if have != count:
                raise ConfigurationError(f"group {group!r} has {have} labels, expected {count}")
        bad = set(self.task_groups) - set(TASK_GROUP_COUNTS)
        if bad:
            raise ConfigurationError(f"unknown task groups: {sorted(bad)}")

    def group_indices(self, group: str):
        return [i for i, g in enumerate(self.task_groups) if g == group]


def default_label_space() -> LabelSpace:
    groups = ["acute"] * 12 + ["mixed"] * 5 + ["chronic"] * 8
    return LabelSpace(
        task_labels=tuple(f"y{i}" for i in range(1, 26)),
        task_groups=tuple(groups),
        aux_labels=tuple(f"r{i}" for i in range(1, 15)),
    )


class ModelBundle:
    """Both encoders and all three heads, as five named parameter groups."""

    def __init__(self, seq_spec: SeqEncoderSpec, img_spec: ImgEncoderSpec,
                 groups: dict, unified_hidden: int):
        self.seq_spec = seq_spec
        self.img_spec = img_spec
        self.unified_hidden = unified_hidden
        self.groups = groups
        missing = set(GROUP_NAMES) - set(groups)
        if missing:
            raise ConfigurationError(f"bundle missing groups: {sorted(missing)}")

    def params(self, *group_names) -> list:
        out = []
        for name in group_names:
            out.extend(self.groups[name].values())
        return out

    def all_params(self) -> list:
        return self.params(*GROUP_NAMES)

    def group_bytes(self, group_name: str) -> bytes:
        """Exact byte image of a group, for bit-identity checks."""
        return b"".join(t.data.tobytes() for t in self.groups[group_name].values())

    def copy_state(self) -> dict:
        return {g: {n: t.data.copy() for n, t in params.items()}
                for g, params in self.groups.items()}

    def load_state(self, state: dict):
        for g, params in self.groups.items():
            for n, t in params.items():
                src = state[g][n]
                if src.shape != t.data.shape:
                    raise DimensionError(f"{g}/{n}: shape {src.shape} != {t.data.shape}")
                t.data = src.copy()

    def save(self, path):
        save_checkpoint(path, self.groups)

    @classmethod
    def from_checkpoint(cls, path, image_side: int = 64) -> "ModelBundle":
        state = load_checkpoint(path)
        missing = set(GROUP_NAMES) - set(state)
        if missing:
            raise ConfigurationError(f"checkpoint missing groups: {sorted(missing)}")
        w_x = state["seq_enc"]["w_x"]
        seq_spec = SeqEncoderSpec(input_dim=w_x.shape[0], hidden_dim=w_x.shape[1] // 4)
        img_params = state["img_enc"]
        stages = []
        s = 1
        while f"s{s}.b1.c1.w" in img_params:
            channels = img_params[f"s{s}.b1.c1.w"].shape[0]
            blocks = 1
            while f"s{s}.b{blocks + 1}.c1.w" in img_params:
                blocks += 1
            stages.append((channels, blocks))
            s += 1
        img_spec = ImgEncoderSpec(
            in_channels=img_params["stem.w"].shape[1],
            image_side=image_side,
            stages=tuple(stages),
        )
        unified_hidden = state["head_unified"]["w1"].shape[1]
        groups = {g: {n: Tensor(a, requires_grad=True) for n, a in params.items()}
                  for g, params in state.items()}
        return cls(seq_spec, img_spec, groups, unified_hidden)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_bundle(seed: int, seq_spec: SeqEncoderSpec | None = None,
                img_spec: ImgEncoderSpec | None = None,
                unified_hidden: int = 64,
                n_task: int = N_TASK_LABELS, n_aux: int = N_AUX_LABELS) -> ModelBundle:
    """Deterministic bundle init: Kaiming-uniform fan-in weights, zero
    biases, LSTM forget-gate bias +1."""
    seq_spec = seq_spec or SeqEncoderSpec()
    img_spec = img_spec or ImgEncoderSpec()
    rng = np.random.default_rng(seed)
    h = seq_spec.hidden_dim

    def p(arr):
        return Tensor(arr, requires_grad=True)

    lstm_bias = np.zeros(4 * h)
    lstm_bias[h:2 * h] = 1.0  # forget gate opens at init
    groups: dict = {
        "seq_enc": {
            "w_x": p(_kaiming_uniform(rng, (seq_spec.input_dim, 4 * h), seq_spec.input_dim)),
            "w_h": p(_kaiming_uniform(rng, (h, 4 * h), h)),
            "b": p(lstm_bias),
        }
    }

    img = {}
    c_in, c0 = img_spec.in_channels, img_spec.stages[0][0]
    img["stem.w"] = p(_kaiming_uniform(rng, (c0, c_in, 3, 3), c_in * 9))
    img["stem.b"] = p(np.zeros(c0))
    for s, (ch, blocks) in enumerate(img_spec.stages, start=1):
        for j in range(1, blocks + 1):
            for conv in ("c1", "c2"):
                img[f"s{s}.b{j}.{conv}.w"] = p(_kaiming_uniform(rng, (ch, ch, 3, 3), ch * 9))
                img[f"s{s}.b{j}.{conv}.b"] = p(np.zeros(ch))
        if s < len(img_spec.stages):
            nxt = img_spec.stages[s][0]
            img[f"down{s}.w"] = p(_kaiming_uniform(rng, (nxt, ch, 3, 3), ch * 9))
            img[f"down{s}.b"] = p(np.zeros(nxt))
    groups["img_enc"] = img

    groups["head_ehr"] = {
        "w": p(_kaiming_uniform(rng, (seq_spec.feature_dim, n_task), seq_spec.feature_dim)),
        "b": p(np.zeros(n_task)),
    }
    groups["head_cxr"] = {
        "w": p(_kaiming_uniform(rng, (img_spec.feature_dim, n_aux), img_spec.feature_dim)),
        "b": p(np.zeros(n_aux)),
    }
    fused = seq_spec.feature_dim + img_spec.feature_dim
    groups["head_unified"] = {
        "w1": p(_kaiming_uniform(rng, (fused, unified_hidden), fused)),
        "b1": p(np.zeros(unified_hidden)),
        "w2": p(_kaiming_uniform(rng, (unified_hidden, n_task), unified_hidden)),
        "b2": p(np.zeros(n_task)),
    }
    return ModelBundle(seq_spec, img_spec, groups, unified_hidden)


def seq_encode_batch(bundle: ModelBundle, xs: np.ndarray) -> Tensor:
    """LSTM over [batch, T, input_dim]; returns the last hidden state [batch, H]."""
    if xs.ndim != 3:
        raise DimensionError(f"seq_encode_batch: expected rank 3, got {xs.shape}")
    b, t_len, d = xs.shape
    if t_len == 0:
        raise EmptySequenceError("empty episode: T = 0")
    if d != bundle.seq_spec.input_dim:
        raise DimensionError(f"episode width {d} != encoder input dim {bundle.seq_spec.input_dim}")
    p = bundle.groups["seq_enc"]
    h_dim = bundle.seq_spec.hidden_dim
    h = Tensor(np.zeros((b, h_dim)))
    c = Tensor(np.zeros((b, h_dim)))
    for t in range(t_len):
        x_t = Tensor(xs[:, t, :])
        gates = bias_add(add(matmul(x_t, p["w_x"]), matmul(h, p["w_h"])), p["b"])
        i_g = sigmoid(slice_cols(gates, 0, h_dim))
        f_g = sigmoid(slice_cols(gates, h_dim, 2 * h_dim))
        g_g = tanh(slice_cols(gates, 2 * h_dim, 3 * h_dim))
        o_g = sigmoid(slice_cols(gates, 3 * h_dim, 4 * h_dim))
        c = add(mul(f_g, c), mul(i_g, g_g))
        h = mul(o_g, tanh(c))
    return h


def seq_encode(bundle: ModelBundle, episode: np.ndarray) -> Tensor:
    """Single-episode convenience wrapper: [T, input_dim] -> [feature_dim]."""
    episode = np.asarray(episode, dtype=np.float64)
    if episode.ndim != 2:
        raise DimensionError(f"seq_encode: expected rank 2, got {episode.shape}")
    return squeeze_row(seq_encode_batch(bundle, episode[None]))


def img_encode_batch(bundle: ModelBundle, imgs: np.ndarray) -> Tensor:
    """Residual CNN over [batch, c_in, side, side]; returns pooled [batch, F].

    The [0, 1] pixel range is centered (-0.5) before the stem so conv
    pre-activations are not dominated by the brightness DC term.
    """
    spec = bundle.img_spec
    if imgs.ndim != 4:
        raise DimensionError(f"img_encode_batch: expected rank 4, got {imgs.shape}")
    if imgs.shape[1] != spec.in_channels or imgs.shape[2] != spec.image_side \
            or imgs.shape[3] != spec.image_side:
        raise DimensionError(
            f"image batch {imgs.shape} does not match the configured "
            f"{spec.in_channels}x{spec.image_side}x{spec.image_side} input"
        )
    p = bundle.groups["img_enc"]
    h = relu(conv2d(Tensor(imgs - 0.5), p["stem.w"], stride=2, bias=p["stem.b"]))
    n_stages = len(spec.stages)
    for s, (_, blocks) in enumerate(spec.stages, start=1):
        for j in range(1, blocks + 1):
            y = relu(conv2d(h, p[f"s{s}.b{j}.c1.w"], stride=1, bias=p[f"s{s}.b{j}.c1.b"]))
            y = conv2d(y, p[f"s{s}.b{j}.c2.w"], stride=1, bias=p[f"s{s}.b{j}.c2.b"])
            h = relu(add(y, h))
        if s < n_stages:
            h = relu(conv2d(h, p[f"down{s}.w"], stride=2, bias=p[f"down{s}.b"]))
    return global_avg_pool(h)


def img_encode(bundle: ModelBundle, image: np.ndarray) -> Tensor:
    """Single-image convenience wrapper: [c_in, side, side] -> [feature_dim]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"img_encode: expected rank 3, got {image.shape}")
    return squeeze_row(img_encode_batch(bundle, image[None]))


def head_forward(bundle: ModelBundle, head: str, feature: Tensor) -> Tensor:
    """Apply one classifier head; output probabilities strictly inside (0, 1)."""
    single = feature.data.ndim == 1
    f = unsqueeze_row(feature) if single else feature
    if head == "ehr":
        p = bundle.groups["head_ehr"]
        out = sigmoid(bias_add(matmul(f, p["w"]), p["b"]))
    elif head == "cxr":
        p = bundle.groups["head_cxr"]
        out = sigmoid(bias_add(matmul(f, p["w"]), p["b"]))
    elif head == "unified":
        p = bundle.groups["head_unified"]
        hidden = relu(bias_add(matmul(f, p["w1"]), p["b1"]))
        out = sigmoid(bias_add(matmul(hidden, p["w2"]), p["b2"]))
    else:
        raise ConfigurationError(f"unknown head {head!r}")
    return squeeze_row(out) if single else out
