"""This module defines Pydantic models describing the extraction network and the mesh head."""

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from deep_fext.models.exceptions import FextError, ErrorTypes


class ScaleSpec(BaseModel):
    """One branch of a multi-scale layer: emulated filter size and feature count."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    scale: int = Field(..., ge=3)
    out_features: int = Field(..., ge=1)

    @field_validator("scale")
    @classmethod
    def scale_is_odd(cls, value: int) -> int:
        """Same-size chains only exist for odd scales."""
        if value % 2 == 0:
            raise ValueError(f"scale must be odd, got {value}")
        return value


class FextLayerSpec(BaseModel):
    """Branches sharing one input inside a feature extraction layer."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    in_channels: int = Field(..., ge=1)
    branches: List[ScaleSpec] = Field(..., min_length=1)
    refactor_3x3: bool = False

    @property
    def out_channels(self) -> int:
        return sum(branch.out_features for branch in self.branches)

    @property
    def max_scale(self) -> int:
        return max(branch.scale for branch in self.branches)


class FextNetworkSpec(BaseModel):
    """Stacked extraction layers; the final feature set concatenates all layer outputs."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: List[FextLayerSpec] = Field(..., min_length=1)
    include_input_passthrough: bool = True

    @property
    def input_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def block_sizes(self) -> List[int]:
        """Channel count of each block in the final feature set, input block first."""
        blocks = [self.input_channels] if self.include_input_passthrough else []
        return blocks + [layer.out_channels for layer in self.layers]

    @property
    def feature_count(self) -> int:
        return sum(self.block_sizes)

    @property
    def receptive_radius(self) -> int:
        """Pixels of context each output feature sees on every side."""
        return sum((layer.max_scale - 1) // 2 for layer in self.layers)

    def check_chain(self) -> None:
        """Raise when a layer does not consume its predecessor's output width."""
        for index in range(1, len(self.layers)):
            expected = self.layers[index - 1].out_channels
            found = self.layers[index].in_channels
            if found != expected:
                raise FextError(
                    f"layer {index + 1} expects {found} input channels but layer {index} "
                    f"produces {expected}",
                    ErrorTypes.CONFIGURATION
                )


class ConvLayerSpec(BaseModel):
    """One convolution of the mesh classifier."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    out_channels: int = Field(..., ge=1)
    kernel_h: int = Field(3, ge=1)
    kernel_w: int = Field(3, ge=1)

    @field_validator("kernel_h", "kernel_w")
    @classmethod
    def kernel_is_odd(cls, value: int) -> int:
        """Mesh convolutions are same-size too."""
        if value % 2 == 0:
            raise ValueError(f"kernel extent must be odd, got {value}")
        return value


class MeshHeadSpec(BaseModel):
    """Feature mesh geometry and the 3-layer CNN classifying it."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mesh_h: int = Field(10, ge=1)
    mesh_w: int = Field(10, ge=1)
    num_classes: int = Field(2, ge=2, le=3)
    conv_layers: Optional[List[ConvLayerSpec]] = None

    @model_validator(mode="after")
    def default_layers(self) -> "MeshHeadSpec":
        """Fill the 8-8-K default and enforce the 3-layer contract."""
        if self.conv_layers is None:
            layers = [ConvLayerSpec(out_channels=8), ConvLayerSpec(out_channels=8),
                      ConvLayerSpec(out_channels=self.num_classes)]
            object.__setattr__(self, "conv_layers", layers)
        if len(self.conv_layers) != 3:
            raise ValueError(f"mesh head needs exactly 3 conv layers, got {len(self.conv_layers)}")
        if self.conv_layers[-1].out_channels != self.num_classes:
            raise ValueError("last mesh conv must output one channel per class")
        return self

    @property
    def mesh_size(self) -> int:
        return self.mesh_h * self.mesh_w


def parse_branches(text: str) -> List[ScaleSpec]:
    """Parse a layer row written as ``scale(features),...``, e.g. ``3(5),5(5),11(3)``."""
    branches = []
    for token in text.split(","):
        scale, _, rest = token.strip().partition("(")
        branches.append(ScaleSpec(scale=int(scale), out_features=int(rest.rstrip(")"))))
    return branches


def _stack(input_channels: int, rows: List[str], passthrough: bool = True) -> FextNetworkSpec:
    layers = []
    in_channels = input_channels
    for row in rows:
        layer = FextLayerSpec(in_channels=in_channels, branches=parse_branches(row))
        layers.append(layer)
        in_channels = layer.out_channels
    return FextNetworkSpec(layers=layers, include_input_passthrough=passthrough)


NETWORK_PRESETS: Dict[str, FextNetworkSpec] = {
    # 21 + 21 + 19 + 18 + 18 = 97 extracted features plus the 3 RGB planes.
    "fext5-100": _stack(3, [
        "3(5),5(5),7(5),9(3),11(3)",
        "3(5),5(5),7(5),9(3),11(3)",
        "3(5),5(4),7(4),9(3),11(3)",
        "3(4),5(4),7(4),9(3),11(3)",
        "3(4),5(4),7(4),9(3),11(3)",
    ]),
    # Desk-scale network for smoke runs: 3 + 6 + 7 = 16 features, a 4x4 mesh.
    "fext2-16": _stack(3, [
        "3(2),5(2),7(2)",
        "3(3),5(2),7(2)",
    ]),
}


def network_preset(name: str) -> FextNetworkSpec:
    """Look up a built-in network spec by name."""
    try:
        return NETWORK_PRESETS[name]
    except KeyError as err:
        known = ", ".join(sorted(NETWORK_PRESETS))
        raise FextError(f"unknown network preset '{name}' (known: {known})", ErrorTypes.CONFIGURATION) from err
