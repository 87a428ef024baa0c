"""
Face-SSD network: shared trunk G1-G3, detection and analysis branches G4-G10,
and six per-scale output heads.

Every scale s produces a heatmap volume of 1 face plane, 4 offset planes
(cx, cy, w, h) and n task planes.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .anchors import FEATURE_SIZES
from .errors import ConfigError, SerializationError, ShapeError
from .models import (
    Activation, DatasetStats, HeadConfig, TensorEntry, WeightsManifest, parse_channel_scale
)
from .nn_ops import ConvLayer, ConvSpec, PoolSpec, conv_block, maxpool2d
from .tensor import Tensor, concat, random_init, read_tensor, subsample_weight_tensor, write_tensor

logger = logging.getLogger("facessd.model")

INPUT_SIZE = 300
NUM_SCALES = 6

# prior probability of "face" at init; keeps early face losses small
FACE_PRIOR = 0.01


class GroupSpec(NamedTuple):
    convs: Tuple[ConvSpec, ...]
    pool: Optional[PoolSpec] = None


def _c(k: int, size: int, stride: int = 1, pad: int = 0) -> ConvSpec:
    return ConvSpec(num_kernels=k, kernel_size=size, stride=stride, padding=pad)


GROUP_TABLE: Dict[str, GroupSpec] = {
    "g1": GroupSpec((_c(64, 3, 1, 1),) * 2, PoolSpec(kernel_size=2, stride=2)),
    "g2": GroupSpec((_c(128, 3, 1, 1),) * 2, PoolSpec(kernel_size=2, stride=2)),
    "g3": GroupSpec((_c(256, 3, 1, 1),) * 3, PoolSpec(kernel_size=2, stride=2)),
    "g4": GroupSpec((_c(512, 3, 1, 1),) * 3, PoolSpec(kernel_size=2, stride=2)),
    "g5": GroupSpec((_c(512, 3, 1, 1),) * 3, PoolSpec(kernel_size=3, stride=1, padding=1)),
    "g6": GroupSpec((_c(1024, 3, 1, 1), _c(1024, 1))),
    "g7": GroupSpec((_c(256, 1), _c(512, 3, 2, 1))),
    "g8": GroupSpec((_c(128, 1), _c(256, 3, 2, 1))),
    "g9": GroupSpec((_c(128, 1), _c(256, 3))),
    "g10": GroupSpec((_c(128, 1), _c(256, 3))),
}

TRUNK_GROUPS = ("g1", "g2", "g3")
BRANCH_GROUPS = ("g4", "g5", "g6", "g7", "g8", "g9", "g10")
# heads read these groups; g4 is tapped before its pool
TAP_GROUPS = ("g4", "g6", "g7", "g8", "g9", "g10")

BRANCHES = ("detection", "analysis")
PARTS = ("trunk",) + BRANCHES

FACE_HEAD = _c(1, 3, 1, 1)
BOX_HEAD = _c(4, 3, 1, 1)


def scale_channels(count: int, channel_scale: Fraction) -> int:
    """Scaled kernel count, rounded up so every layer keeps at least one channel."""
    return max(1, math.ceil(Fraction(count) * channel_scale))


def scaled_group(name: str, channel_scale: Fraction) -> GroupSpec:
    group = GROUP_TABLE[name]
    convs = tuple(
        spec.model_copy(update={"num_kernels": scale_channels(spec.num_kernels, channel_scale)})
        for spec in group.convs
    )
    return GroupSpec(convs, group.pool)


@dataclass(eq=False)
class HeatmapVolume:
    """
    Output of one scale.

    Attributes:
        scale: 1-based scale index
        face: [HM, HM] face confidences, None when the detection branch was skipped
        offsets: [4, HM, HM] box offsets (cx, cy, w, h), None likewise
        tasks: [n, HM, HM] task scores, None when the analysis branch was skipped
    """
    scale: int
    face: Optional[Tensor]
    offsets: Optional[Tensor]
    tasks: Optional[Tensor]

    @property
    def size(self) -> int:
        for plane in (self.face, self.tasks):
            if plane is not None:
                return plane.shape[-1]
        raise ShapeError("empty heatmap volume")

    @property
    def depth(self) -> int:
        depth = 0
        if self.face is not None:
            depth += 1 + self.offsets.shape[0]
        if self.tasks is not None:
            depth += self.tasks.shape[0]
        return depth

    def planes(self) -> np.ndarray:
        """All planes stacked as [1 + 4 + n, HM, HM]."""
        if self.face is None or self.tasks is None:
            raise ShapeError(f"scale {self.scale} volume is missing a branch")
        return np.concatenate([self.face.data[None], self.offsets.data, self.tasks.data], axis=0)


class FaceSSDModel:
    """
    Named parameters of the whole network.

    Parameter names follow ``<part>.<group>.conv<i>.(weight|bias)`` for feature
    layers and ``<branch>.head<s>.(face|box|task).(weight|bias)`` for heads.
    """

    def __init__(self, head: HeadConfig, channel_scale="1/8", seed: int = 0):
        try:
            self.channel_scale = parse_channel_scale(channel_scale)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.head = head
        self.seed = seed
        self.groups = {name: scaled_group(name, self.channel_scale) for name in GROUP_TABLE}
        self.layers: Dict[str, List[ConvLayer]] = {}
        self.params: Dict[str, Tensor] = {}
        self._frozen = {part: False for part in PARTS}
        self._build()

    # -- construction ---------------------------------------------------------

    def _new_layer(self, name: str, spec: ConvSpec, in_channels: int, bias_value: float = 0.0) -> ConvLayer:
        shape = (spec.num_kernels, in_channels, spec.kernel_size, spec.kernel_size)
        param_seed = int(np.random.SeedSequence([self.seed, len(self.params)]).generate_state(1)[0])
        weight = random_init(shape, seed=param_seed, requires_grad=True)
        bias = Tensor(np.full(spec.num_kernels, bias_value), requires_grad=True)
        self.params[f"{name}.weight"] = weight
        self.params[f"{name}.bias"] = bias
        return ConvLayer(name, spec, weight, bias)

    def _add_group(self, part: str, group_name: str, in_channels: int) -> int:
        layers = []
        for i, spec in enumerate(self.groups[group_name].convs, start=1):
            layers.append(self._new_layer(f"{part}.{group_name}.conv{i}", spec, in_channels))
            in_channels = spec.num_kernels
        self.layers[f"{part}.{group_name}"] = layers
        return in_channels

    def _build(self):
        channels = 3
        for name in TRUNK_GROUPS:
            channels = self._add_group("trunk", name, channels)
        trunk_channels = channels

        n = self.head.n_tasks
        task_spec = _c(n, 3, 1, 1)
        face_bias = math.log(FACE_PRIOR / (1.0 - FACE_PRIOR))
        for branch in BRANCHES:
            channels = trunk_channels
            tap_channels = []
            for name in BRANCH_GROUPS:
                channels = self._add_group(branch, name, channels)
                if name in TAP_GROUPS:
                    tap_channels.append(channels)
            for s, c in enumerate(tap_channels, start=1):
                prefix = f"{branch}.head{s}"
                if branch == "detection":
                    self.layers[f"{prefix}.face"] = [self._new_layer(f"{prefix}.face", FACE_HEAD, c, face_bias)]
                    self.layers[f"{prefix}.box"] = [self._new_layer(f"{prefix}.box", BOX_HEAD, c)]
                else:
                    self.layers[f"{prefix}.task"] = [self._new_layer(f"{prefix}.task", task_spec, c)]

        logger.debug(
            f"BUILT | scale={self.channel_scale} | n={n} | params={len(self.params)} | "
            f"values={sum(t.size for t in self.params.values())}"
        )

    # -- forward --------------------------------------------------------------

    def _task_activation(self, raw: Tensor) -> Tensor:
        segments = self.head.segments()
        if all(seg.activation == Activation.LINEAR for seg in segments):
            return raw
        if all(seg.activation == Activation.SIGMOID for seg in segments):
            return raw.sigmoid()
        pieces = []
        for seg in segments:
            piece = raw.take(np.arange(seg.start, seg.stop), axis=0)
            pieces.append(piece.sigmoid() if seg.activation == Activation.SIGMOID else piece)
        return concat(pieces, axis=0)

    def _branch_taps(self, branch: str, x: Tensor) -> List[Tensor]:
        taps = []
        for name in BRANCH_GROUPS:
            x = conv_block(x, self.layers[f"{branch}.{name}"])
            if name in TAP_GROUPS:
                taps.append(x)
            pool = self.groups[name].pool
            if pool is not None:
                x = maxpool2d(x, pool)
        return taps

    def forward(self, image: Tensor, branches: Sequence[str] = BRANCHES) -> List[HeatmapVolume]:
        """
        Run the network on one normalized [3, 300, 300] image.

        ``branches`` may restrict the pass to one branch; planes of the skipped
        branch come back as None.
        """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.shape != (3, INPUT_SIZE, INPUT_SIZE):
            raise ShapeError(f"input must be [3, {INPUT_SIZE}, {INPUT_SIZE}], got {image.shape}")
        unknown = set(branches) - set(BRANCHES)
        if unknown or not branches:
            raise ConfigError(f"unknown branches {sorted(unknown)}")

        x = image
        for name in TRUNK_GROUPS:
            x = conv_block(x, self.layers[f"trunk.{name}"], self.groups[name].pool)

        faces: List[Optional[Tensor]] = [None] * NUM_SCALES
        offsets: List[Optional[Tensor]] = [None] * NUM_SCALES
        tasks: List[Optional[Tensor]] = [None] * NUM_SCALES

        if "detection" in branches:
            for s, tap in enumerate(self._branch_taps("detection", x)):
                face = self.layers[f"detection.head{s + 1}.face"][0](tap)
                faces[s] = face.sigmoid().reshape(face.shape[1:])
                offsets[s] = self.layers[f"detection.head{s + 1}.box"][0](tap)
        if "analysis" in branches:
            for s, tap in enumerate(self._branch_taps("analysis", x)):
                tasks[s] = self._task_activation(self.layers[f"analysis.head{s + 1}.task"][0](tap))

        volumes = [HeatmapVolume(s + 1, faces[s], offsets[s], tasks[s]) for s in range(NUM_SCALES)]
        for volume, expected in zip(volumes, FEATURE_SIZES):
            if volume.size != expected:
                raise ShapeError(f"scale {volume.scale} produced {volume.size}x{volume.size}, expected {expected}")
        return volumes

    __call__ = forward

    # -- parameter management ------------------------------------------------------

    def named_parameters(self, part: Optional[str] = None) -> Iterable[Tuple[str, Tensor]]:
        for name, param in self.params.items():
            if part is None or name.startswith(f"{part}."):
                yield name, param

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, p) for n, p in self.params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def set_frozen(self, part: str, frozen: bool) -> None:
        """Freeze or unfreeze one of trunk, detection, analysis."""
        if part not in PARTS:
            raise ConfigError(f"unknown part {part!r} (expected one of {', '.join(PARTS)})")
        for _, param in self.named_parameters(part):
            param.requires_grad = not frozen
            if frozen:
                param.zero_grad()
        self._frozen[part] = frozen

    def is_frozen(self, part: str) -> bool:
        return self._frozen[part]

    def copy_detection_to_analysis(self) -> int:
        """Copy G4-G10 of the detection branch into the analysis branch; heads are untouched."""
        copied = 0
        for name, param in self.named_parameters("detection"):
            if ".head" in name:
                continue
            target = self.params[name.replace("detection.", "analysis.", 1)]
            if target.shape != param.shape:
                raise ShapeError(f"cannot copy {name}: {param.shape} vs {target.shape}")
            target.data = param.data.copy()
            copied += 1
        logger.info(f"COPIED | detection -> analysis | tensors={copied}")
        return copied

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise SerializationError(
                f"state does not match model (missing={sorted(missing)[:3]}, unexpected={sorted(extra)[:3]})"
            )
        for name, param in self.params.items():
            values = np.asarray(state[name])
            if values.shape != param.shape:
                raise ShapeError(f"{name}: expected {param.shape}, got {values.shape}")
            param.data = values.astype(param.data.dtype, copy=True)

    def clone(self) -> "FaceSSDModel":
        """Independent copy (same config, copied values, same freeze state)."""
        other = FaceSSDModel(self.head, self.channel_scale, self.seed)
        other.load_state_dict(self.state_dict())
        for part, frozen in self._frozen.items():
            other.set_frozen(part, frozen)
        return other

    def astype(self, dtype) -> None:
        for param in self.params.values():
            param.data = param.data.astype(dtype)


def build_model(head: HeadConfig, channel_scale="1/8", seed: int = 0) -> FaceSSDModel:
    return FaceSSDModel(head, channel_scale, seed)


def forward(model: FaceSSDModel, image: Tensor, branches: Sequence[str] = BRANCHES) -> List[HeatmapVolume]:
    return model.forward(image, branches)


def copy_detection_to_analysis(model: FaceSSDModel) -> int:
    return model.copy_detection_to_analysis()


def set_frozen(model: FaceSSDModel, part: str, frozen: bool) -> None:
    model.set_frozen(part, frozen)


# -- weight subsampling from a wider source --------------------------------------

def _subsample_factor(src: int, dst: int) -> int:
    if src < dst:
        raise ConfigError(f"cannot subsample a mode of size {src} to a larger size {dst}")
    factor = math.ceil(src / dst)
    if math.ceil(src / factor) == dst:
        return factor
    return max(1, src // dst)


def subsample_to(values: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Strided subsampling of a weight (rank 4) or bias (rank 1) to ``shape``.

    Uses the largest uniform stride that still leaves enough entries and
    truncates any surplus.
    """
    values = np.asarray(values)
    if values.ndim == 1:
        factor = _subsample_factor(values.shape[0], shape[0])
        return values[::factor][:shape[0]].copy()
    if values.ndim != 4 or len(shape) != 4:
        raise ShapeError(f"subsampling needs rank 1 or 4 tensors, got {values.shape} -> {shape}")
    factors = [_subsample_factor(s, d) for s, d in zip(values.shape, shape)]
    out = subsample_weight_tensor(values, factors).data
    return out[:shape[0], :shape[1], :shape[2], :shape[3]].copy()


def initialize_from(model: FaceSSDModel, source: Dict[str, np.ndarray]) -> List[str]:
    """
    Step-1 initialisation: copy matching parameters from a (possibly wider)
    source state, subsampling each mode uniformly. Returns the names initialised;
    everything else keeps its random init.
    """
    loaded = []
    for name, param in model.params.items():
        if name not in source:
            continue
        values = np.asarray(source[name])
        if values.ndim != param.ndim:
            logger.warning(f"SKIP INIT | {name} | rank {values.ndim} vs {param.ndim}")
            continue
        try:
            param.data = subsample_to(values, param.shape).astype(param.data.dtype)
        except ConfigError as e:
            logger.warning(f"SKIP INIT | {name} | {e}")
            continue
        loaded.append(name)
    logger.info(f"INITIALISED | from_source={len(loaded)} | random={len(model.params) - len(loaded)}")
    return loaded


# -- weights file ------------------------------------------------------------------

WEIGHTS_MAGIC = b"FSSW"
_LENGTH = struct.Struct("<I")


def save_weights(model: FaceSSDModel, path: Union[str, Path], stats: Optional[DatasetStats] = None) -> Path:
    """
    Write ``FSSW``, a u32 manifest length, the JSON manifest, then every tensor
    in manifest order using the tensor encoding.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = WeightsManifest(
        head=model.head,
        channel_scale=str(model.channel_scale),
        seed=model.seed,
        stats=stats,
        tensors=[
            TensorEntry(name=name, shape=list(param.shape), dtype=str(param.data.dtype))
            for name, param in model.params.items()
        ],
    )
    header = manifest.model_dump_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(_LENGTH.pack(len(header)))
        fh.write(header)
        for param in model.params.values():
            write_tensor(fh, param.data)
    return path


def load_weights(path: Union[str, Path]) -> Tuple[WeightsManifest, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise SerializationError(f"weights file not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise SerializationError(f"{path}: not a weights file")
        raw_length = fh.read(_LENGTH.size)
        if len(raw_length) != _LENGTH.size:
            raise SerializationError(f"{path}: truncated header")
        (length,) = _LENGTH.unpack(raw_length)
        try:
            manifest = WeightsManifest.model_validate(json.loads(fh.read(length).decode("utf-8")))
        except ValueError as e:
            raise SerializationError(f"{path}: bad manifest: {e}") from None

        state = {}
        for entry in manifest.tensors:
            values = read_tensor(fh)
            if list(values.shape) != entry.shape:
                raise SerializationError(f"{path}: {entry.name} has shape {values.shape}, manifest says {entry.shape}")
            state[entry.name] = values
        if fh.read(1):
            raise SerializationError(f"{path}: trailing bytes after last tensor")
    return manifest, state


def load_model(path: Union[str, Path]) -> Tuple[FaceSSDModel, WeightsManifest]:
    manifest, state = load_weights(path)
    model = FaceSSDModel(manifest.head, manifest.channel_scale, manifest.seed)
    model.load_state_dict(state)
    return model, manifest
