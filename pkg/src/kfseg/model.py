"""Encoder + bottleneck block + decoder composed into one sequence model.

Checkpoints are a pair of files: `<stem>.ckpt`, an npz archive of named
parameter/buffer/optimizer arrays, and `<stem>.json`, a sidecar recording
the model config, training metadata and optimizer bookkeeping. Restoring
is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .blocks import BlockConfig, build_block
from .decoder import Decoder
from .encoders import EncoderConfig, build_encoder, kaiming_init
from .errors import CorruptArchive, InvalidConfig, StateError, VersionMismatch

CHECKPOINT_FORMAT_VERSION = 1

ENCODER_LETTER = {"vanilla": "V", "resnet": "R", "hybrid": "H"}
LETTER_ENCODER = {v: k for k, v in ENCODER_LETTER.items()}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        expected = self.block.stack_depth if self.block.kind == "stack" else 1
        if self.encoder.in_channels != expected:
            raise InvalidConfig(
                f"block {self.block.kind!r} requires in_channels == {expected}, "
                f"got {self.encoder.in_channels}"
            )

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "block": asdict(self.block), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            block=BlockConfig(**d["block"]),
            seed=int(d.get("seed", 0)),
        )

    @property
    def label(self) -> str:
        return config_label(self.encoder.variant, self.block.kind)


def config_label(encoder_variant: str, block_kind: str) -> str:
    """Row label used in reports and run directories, e.g. 'V+kf'."""
    letter = ENCODER_LETTER[encoder_variant]
    return letter if block_kind == "none" else f"{letter}+{block_kind}"


def parse_config_label(label: str) -> tuple[str, str]:
    """Inverse of config_label; 'Ours' is accepted as an alias for 'kf'."""
    parts = label.split("+")
    if parts[0] not in LETTER_ENCODER:
        raise InvalidConfig(f"unknown encoder letter in label {label!r}")
    encoder = LETTER_ENCODER[parts[0]]
    if len(parts) == 1:
        return encoder, "none"
    kind = parts[1].lower()
    if kind == "ours":
        kind = "kf"
    return encoder, kind


class SequenceModelState:
    """Per-video recurrent state; owned by exactly one streaming evaluation."""

    def __init__(self, block_state, owner: "SequenceModel", frame_index: int = -1):
        self.block_state = block_state
        self.owner = owner
        self.frame_index = frame_index


class SequenceModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder = build_encoder(config.encoder, init_seed=config.seed)
        grid = (config.encoder.image_size // 8, config.encoder.image_size // 8)
        block = build_block(
            config.block,
            channels=config.encoder.bottleneck_channels,
            grid=grid,
            skip_channels=config.encoder.channel_plan,
        )
        # KF parameters archive under their own namespace (kf.f1.* etc.)
        self._block_attr = "kf" if config.block.kind == "kf" else "block"
        setattr(self, self._block_attr, block)
        self.decoder = Decoder(config.encoder.base_channels)
        if config.encoder.variant in ("vanilla", "hybrid"):
            kaiming_init(self.decoder)

    @property
    def temporal_block(self) -> nn.Module:
        return getattr(self, self._block_attr)

    @property
    def is_recurrent(self) -> bool:
        return self.config.block.recurrent

    def reset_sequence(self, first_frame: torch.Tensor | None = None):
        """Fresh state for a new video; None for stateless blocks.

        The KF block initializes from the first observation, so it needs
        the first frame; LSTM/ConvLSTM states are shape-derived zeros.
        """
        block = self.temporal_block
        if not self.is_recurrent:
            return None
        if first_frame is None:
            raise StateError("recurrent blocks need the first frame to reset")
        if self.config.block.kind == "kf":
            z0 = self.encoder(first_frame).bottleneck
        else:
            # LSTM/ConvLSTM states are zeros; only the shape matters
            b, _, h, w = first_frame.shape
            z0 = first_frame.new_zeros(
                b, self.config.encoder.bottleneck_channels, h // 8, w // 8
            )
        return SequenceModelState(block.init_state(z0), owner=self)

    def _check_state(self, state) -> None:
        if not self.is_recurrent:
            if state is not None:
                raise StateError(f"{self.config.block.kind!r} block is stateless; pass state=None")
            return
        if state is None:
            raise StateError("recurrent block stepped without reset_sequence")
        if not isinstance(state, SequenceModelState) or state.owner is not self:
            raise StateError("state belongs to a different model")

    def forward_frame(self, state, frame: torch.Tensor):
        """One frame through encoder -> block -> decoder; returns (logits, state)."""
        self._check_state(state)
        out = self.encoder(frame)
        z = out.bottleneck
        if self.is_recurrent:
            x_t, new_block_state = self.temporal_block.forward_step(z, state.block_state)
            new_state = SequenceModelState(new_block_state, owner=self, frame_index=state.frame_index + 1)
        else:
            x_t, _ = self.temporal_block.forward_step(z, None)
            new_state = None
        skips = out.skips
        if self.config.block.kind == "attn":
            skips = self.temporal_block.gate_skips(skips, x_t)
        return self.decoder(x_t, skips), new_state

    def prepare_frame_input(self, frames: np.ndarray, t: int) -> torch.Tensor:
        """Model input for frame t of a (T, H, W) array; stacks channels
        for the stacked-input variant."""
        from .blocks import stack_window

        if self.config.block.kind == "stack":
            window = stack_window(frames, t, self.config.block.stack_depth)
            return torch.from_numpy(window).float().unsqueeze(0)
        return torch.from_numpy(frames[t]).float().reshape(1, 1, *frames[t].shape)


def build_model(config: ModelConfig) -> SequenceModel:
    return SequenceModel(config)


def make_model_config(
    encoder: str = "vanilla",
    block: str = "none",
    base_channels: int = 64,
    image_size: int = 256,
    seed: int = 0,
    stack_depth: int = 5,
    **encoder_overrides,
) -> ModelConfig:
    """ModelConfig with the in_channels/stack coupling handled."""
    block_cfg = BlockConfig(kind=block, stack_depth=stack_depth)
    in_channels = stack_depth if block == "stack" else 1
    enc_cfg = EncoderConfig(
        variant=encoder,
        in_channels=in_channels,
        base_channels=base_channels,
        image_size=image_size,
        **encoder_overrides,
    )
    return ModelConfig(encoder=enc_cfg, block=block_cfg, seed=seed)


def comparison_grid(
    base_channels: int = 64, image_size: int = 256, seed: int = 0, **encoder_overrides
) -> list[ModelConfig]:
    """All 18 (encoder x block) configurations of the comparison table."""
    from .blocks import BLOCK_KINDS
    from .encoders import ENCODER_VARIANTS

    return [
        make_model_config(enc, blk, base_channels, image_size, seed, **encoder_overrides)
        for enc in ENCODER_VARIANTS
        for blk in BLOCK_KINDS
    ]


def save_checkpoint(model: SequenceModel, optimizer, metadata: dict, path) -> Path:
    """Write `<stem>.ckpt` + `<stem>.json`; parameters restore bit-exactly."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param.{name}"] = tensor.detach().cpu().numpy()

    optim_doc = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        tensor_keys: dict[str, list[str]] = {}
        for idx, entry in sd["state"].items():
            keys = []
            for key, value in entry.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"optim.{idx}.{key}"] = value.detach().cpu().numpy()
                    keys.append(key)
                else:
                    arrays[f"optim.{idx}.{key}"] = np.asarray(value)
                    keys.append(key)
            tensor_keys[str(idx)] = keys
        optim_doc = {"param_groups": sd["param_groups"], "state_keys": tensor_keys}

    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "metadata": metadata,
        "optimizer": optim_doc,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_checkpoint(path, model: SequenceModel | None = None):
    """Load (model, optimizer_state_dict_or_None, metadata) from a checkpoint.

    If `model` is given, its config must match the sidecar exactly.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise CorruptArchive(f"checkpoint pair missing at {path}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptArchive(f"sidecar is not valid JSON: {exc}") from exc
    if sidecar.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format {sidecar.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}"
        )
    config = ModelConfig.from_dict(sidecar["config"])
    if model is not None:
        if model.config.to_dict() != config.to_dict():
            raise VersionMismatch("checkpoint config does not match the provided model")
    else:
        model = build_model(config)

    try:
        with np.load(path) as archive:
            state = {}
            for name, tensor in model.state_dict().items():
                key = f"param.{name}"
                if key not in archive.files:
                    raise CorruptArchive(f"checkpoint missing array {key}")
                state[name] = torch.from_numpy(archive[key]).to(tensor.dtype)
            model.load_state_dict(state)

            optim_state = None
            doc = sidecar.get("optimizer")
            if doc is not None:
                entries = {}
                for idx_str, keys in doc["state_keys"].items():
                    entry = {}
                    for key in keys:
                        arr = archive[f"optim.{idx_str}.{key}"]
                        entry[key] = torch.from_numpy(arr) if arr.ndim > 0 else torch.tensor(arr)
                    entries[int(idx_str)] = entry
                optim_state = {"state": entries, "param_groups": doc["param_groups"]}
    except (KeyError, ValueError, OSError) as exc:
        raise CorruptArchive(f"cannot read checkpoint {path}: {exc}") from exc

    return model, optim_state, sidecar.get("metadata", {})
